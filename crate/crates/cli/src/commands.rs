//! One function per subcommand.

use std::fs;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use ratlab_core::attack::{
    default_positions, empty_trigger_set, evaluate_attack, fixed_trigger_set, search,
    LossConfig, Measure, Mode, QueryMethod, SampleOutcome, SearchConfig, SearchOutcome,
    TriggerSet, TriggerShape,
};
use ratlab_core::data::{generate_synthetic, SyntheticSpec};
use ratlab_core::metrics::{aggregate, report_to_csv, samples_to_jsonl, MetricsReport};
use ratlab_core::model::{
    load_checkpoint, save_checkpoint, MaskMode, ModelBundle, ModelConfig,
};
use ratlab_core::train::{accuracy, train, TrainConfig};
use ratlab_core::Real;

use crate::artifacts::{
    cell, create_run_dir, load_data, mean_metrics_csv, rationale_mean, write_config,
    write_history, write_reports, write_trace, DataDir,
};
use crate::{
    AblateArgs, AttackArgs, Command, EvaluateArgs, GenDataArgs, RerunArgs, SearchArgs,
    ShapeArgs, SweepArgs, TrainArgs, TransferArgs,
};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_run(a),
        Command::Attack(a) => attack_run(a),
        Command::Evaluate(a) => evaluate_run(a),
        Command::Transfer(a) => transfer_run(a),
        Command::Ablate(a) => ablate_run(a),
        Command::Sweep(a) => sweep_run(a),
        Command::Rerun(a) => rerun(a),
    }
}

impl ShapeArgs {
    fn to_shape(&self) -> Result<TriggerShape> {
        let positions = match &self.positions {
            Some(p) => p.clone(),
            None => default_positions(self.groups).with_context(|| {
                format!(
                    "no default insertion points for {} trigger groups; pass --positions",
                    self.groups
                )
            })?,
        };
        let shape = TriggerShape {
            positions,
            tokens_per_group: self.tokens_per_group,
        };
        shape.validate().context("trigger shape")?;
        Ok(shape)
    }
}

fn load_bundle(path: &std::path::Path) -> Result<ModelBundle<Real>> {
    load_checkpoint::<Real>(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn fmt4(v: Option<f64>) -> String {
    v.map(|x| format!("{:.4}", x)).unwrap_or_else(|| "-".into())
}

fn headline(report: &MetricsReport) -> String {
    format!(
        "acc {:.4} -> {:.4} (|d| {:.4}), gold-overlap drop {}, capture {}{}",
        report.accuracy.acc_clean,
        report.accuracy.acc_adv,
        report.accuracy.delta_acc_abs,
        fmt4(rationale_mean(report, "gold_jaccard_drop")),
        fmt4(rationale_mean(report, "attack_rate")),
        report
            .note
            .as_deref()
            .map(|n| format!(" [{}]", n))
            .unwrap_or_default()
    )
}

fn surfaces_line(set: &TriggerSet) -> String {
    set.surfaces
        .iter()
        .map(|g| g.join(" "))
        .collect::<Vec<_>>()
        .join(" | ")
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.out.join("embeddings.txt").exists() && !a.force {
        bail!(
            "{} already holds a corpus; pass --force to overwrite",
            a.out.display()
        );
    }
    let spec = SyntheticSpec {
        train_docs: a.train_docs,
        dev_docs: a.dev_docs,
        test_docs: a.test_docs,
        vocab: a.vocab,
        cues_per_class: a.cues_per_class,
        dim: a.dim,
        sentences_per_doc: a.sentences_per_doc,
        tokens_per_sentence: a.tokens_per_sentence,
        sparsity: a.sparsity,
        distractor_rate: a.distractor_rate,
        level: a.level,
        seed: a.seed,
    };
    let data = generate_synthetic::<Real>(&spec).context("generating the synthetic corpus")?;
    fs::create_dir_all(&a.out)
        .with_context(|| format!("creating corpus directory {}", a.out.display()))?;
    data.write_to_dir(&a.out)
        .with_context(|| format!("writing corpus to {}", a.out.display()))?;
    write_config(&a.out, &Command::GenData(a.clone()))?;
    println!(
        "corpus: {} train / {} dev / {} test documents, vocabulary {}, dim {} -> {}",
        data.train.docs.len(),
        data.dev.docs.len(),
        data.test.docs.len(),
        data.table.vocab_size(),
        data.table.dim(),
        a.out.display()
    );
    Ok(())
}

fn train_run(a: TrainArgs) -> Result<()> {
    let dir = create_run_dir(&a.out, &a.run_name, "train")?;
    write_config(&dir, &Command::Train(a.clone()))?;
    let d = load_data(&a.data)?;

    let mut mc = ModelConfig::default_for(a.variant);
    mc.level = a.level;
    mc.encoder = a.encoder;
    if let Some(v) = a.hidden {
        mc.hidden = v;
    }
    if let Some(v) = a.window {
        mc.window = v;
    }
    if let Some(v) = a.classes {
        mc.classes = v;
    }
    if let Some(v) = a.sparsity {
        mc.sparsity = v;
    }
    if let Some(v) = a.temperature {
        mc.temperature = v;
    }

    let mut tc = TrainConfig::default_for(a.variant);
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(v) = a.embed_lr_scale {
        tc.embed_lr_scale = v;
    }
    if let Some(v) = a.rationalizer_lr_scale {
        tc.rationalizer_lr_scale = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.max_epochs {
        tc.max_epochs = v;
    }
    if let Some(v) = a.patience {
        tc.patience = v;
    }
    if let Some(v) = a.lambda {
        tc.lambda = v;
    }
    if let Some(v) = a.gamma {
        tc.gamma = v;
    }
    if let Some(v) = a.clip_norm {
        tc.clip_norm = v;
    }
    tc.supervised = !a.unsupervised;
    if a.soft_mask {
        tc.mask_mode = MaskMode::Soft;
    }
    tc.seed = a.seed;

    let mut bundle =
        ModelBundle::new(&d.table, mc, a.seed).context("initializing the model bundle")?;
    let t0 = Instant::now();
    let outcome = train(&mut bundle, &d.train.docs, &d.dev.docs, &tc).context("training")?;
    let seconds = t0.elapsed().as_secs_f64();
    let test_acc = accuracy(&bundle, &d.test.docs).context("scoring the test split")?;

    save_checkpoint(&bundle, &dir.join("model.json")).context("saving the checkpoint")?;
    write_history(&dir, &outcome.history)?;
    println!(
        "trained {} in {:.1}s: {} epochs, best epoch {} (dev acc {:.4}), test acc {:.4}{}",
        a.variant.name(),
        seconds,
        outcome.epochs_run,
        outcome.best_epoch,
        outcome.best_dev_acc,
        test_acc,
        if outcome.stopped_early { ", stopped early" } else { "" }
    );

    // Clean-input rationale quality, for the operator's eye only.
    let empty = empty_trigger_set(&bundle, Mode::NonTarget);
    let eval = evaluate_attack(&bundle, &d.test.docs, &empty).context("clean evaluation")?;
    let report = aggregate(&eval.samples).context("aggregating clean metrics")?;
    if let Some(gr) = rationale_mean(&report, "gold_jaccard_clean") {
        println!("clean gold-rationale jaccard: {:.4}", gr);
    }
    Ok(())
}

struct ScoredAttack {
    outcome: SearchOutcome,
    report: MetricsReport,
    samples: Vec<SampleOutcome>,
    seconds: f64,
}

#[allow(clippy::too_many_arguments)]
fn search_and_score(
    bundle: &ModelBundle<Real>,
    d: &DataDir,
    search_split: &str,
    eval_split: &str,
    mode: Mode,
    measure: Measure,
    query: QueryMethod,
    shape: TriggerShape,
    knobs: &SearchArgs,
    seed: u64,
) -> Result<ScoredAttack> {
    let cfg = SearchConfig {
        loss: LossConfig {
            mode,
            measure,
            beta: knobs.beta,
            mask_mode: MaskMode::HardSt,
        },
        query,
        shape,
        eta: knobs.eta,
        k: knobs.candidates,
        rounds: knobs.rounds,
        stop_patience: knobs.stop_patience,
        search_batch: knobs.search_batch,
        seed,
    };
    let t0 = Instant::now();
    let outcome =
        search(bundle, d.split(search_split)?, &cfg).context("searching for triggers")?;
    let seconds = t0.elapsed().as_secs_f64();
    let eval = evaluate_attack(bundle, d.split(eval_split)?, &outcome.triggers)
        .context("scoring the triggers")?;
    let report = aggregate(&eval.samples).context("aggregating metrics")?;
    Ok(ScoredAttack {
        outcome,
        report,
        samples: eval.samples,
        seconds,
    })
}

fn attack_run(a: AttackArgs) -> Result<()> {
    if a.seeds.is_empty() {
        bail!("pass at least one seed");
    }
    let dir = create_run_dir(&a.out, &a.run_name, "attack")?;
    write_config(&dir, &Command::Attack(a.clone()))?;
    let d = load_data(&a.data)?;
    let bundle = load_bundle(&a.model)?;
    let shape = a.shape.to_shape()?;

    let mut per_seed = Vec::new();
    for &seed in &a.seeds {
        let scored = search_and_score(
            &bundle,
            &d,
            &a.search_split,
            &a.eval_split,
            a.mode,
            a.measure,
            a.query,
            shape.clone(),
            &a.search,
            seed,
        )
        .with_context(|| format!("seed {}", seed))?;
        scored
            .outcome
            .triggers
            .save(&dir.join(format!("triggers-seed{}.json", seed)))
            .context("saving the trigger set")?;
        write_trace(&dir, &format!("trace-seed{}.csv", seed), &scored.outcome.rounds)?;
        fs::write(
            dir.join(format!("metrics-seed{}.csv", seed)),
            report_to_csv(&scored.report),
        )?;
        fs::write(
            dir.join(format!("samples-seed{}.jsonl", seed)),
            samples_to_jsonl(&scored.samples).context("serializing samples")?,
        )?;
        write_reports(
            &dir,
            &format!("report-seed{}", seed),
            &format!("attack, seed {}", seed),
            &scored.samples,
            &bundle.vocab,
            a.report_samples,
        )?;
        println!(
            "seed {}: {} rounds, loss {:.4} -> {:.4} in {:.1}s, triggers [{}]",
            seed,
            scored.outcome.rounds.len(),
            scored.outcome.initial_loss,
            scored.outcome.final_loss,
            scored.seconds,
            surfaces_line(&scored.outcome.triggers)
        );
        println!("        {}", headline(&scored.report));
        per_seed.push((seed, scored.report));
    }
    fs::write(dir.join("metrics-mean.csv"), mean_metrics_csv(&per_seed))?;
    println!("mean table over {} seeds: {}", per_seed.len(), dir.join("metrics-mean.csv").display());
    Ok(())
}

fn evaluate_run(a: EvaluateArgs) -> Result<()> {
    let dir = create_run_dir(&a.out, &a.run_name, "evaluate")?;
    write_config(&dir, &Command::Evaluate(a.clone()))?;
    let d = load_data(&a.data)?;
    let bundle = load_bundle(&a.model)?;

    let set = match &a.triggers {
        Some(path) => TriggerSet::load(path)
            .with_context(|| format!("loading trigger set {}", path.display()))?,
        None if !a.group.is_empty() => {
            let positions = match &a.positions {
                Some(p) => p.clone(),
                None => default_positions(a.group.len()).with_context(|| {
                    format!(
                        "no default insertion points for {} groups; pass --positions",
                        a.group.len()
                    )
                })?,
            };
            fixed_trigger_set(&bundle, &a.group, &positions, a.mode)
                .context("building the literal trigger set")?
        }
        None => bail!("pass --triggers FILE or at least one --group"),
    };

    let eval = evaluate_attack(&bundle, d.split(&a.split)?, &set).context("scoring triggers")?;
    let report = aggregate(&eval.samples).context("aggregating metrics")?;
    fs::write(dir.join("metrics.csv"), report_to_csv(&report))?;
    fs::write(
        dir.join("samples.jsonl"),
        samples_to_jsonl(&eval.samples).context("serializing samples")?,
    )?;
    write_reports(
        &dir,
        "report",
        "evaluation",
        &eval.samples,
        &bundle.vocab,
        a.report_samples,
    )?;
    println!("triggers [{}]", surfaces_line(&set));
    println!("{}", headline(&report));
    Ok(())
}

fn transfer_run(a: TransferArgs) -> Result<()> {
    let dir = create_run_dir(&a.out, &a.run_name, "transfer")?;
    write_config(&dir, &Command::Transfer(a.clone()))?;
    let d = load_data(&a.data)?;
    let source = load_bundle(&a.source_model)?;
    let target = load_bundle(&a.target_model)?;

    let mut csv = String::from(
        "index,triggers,source_attack_rate,target_attack_rate,source_drop,target_drop,target_delta_acc_abs\n",
    );
    for (i, path) in a.triggers.iter().enumerate() {
        let set = TriggerSet::load(path)
            .with_context(|| format!("loading trigger set {}", path.display()))?;
        let docs = d.split(&a.split)?;
        let src_eval = evaluate_attack(&source, docs, &set)
            .with_context(|| format!("{}: scoring on the source bundle", path.display()))?;
        let src_report = aggregate(&src_eval.samples).context("aggregating source metrics")?;
        let tgt_eval = evaluate_attack(&target, docs, &set)
            .with_context(|| format!("{}: scoring on the target bundle", path.display()))?;
        let tgt_report = aggregate(&tgt_eval.samples).context("aggregating target metrics")?;

        fs::write(
            dir.join(format!("metrics-source-{}.csv", i)),
            report_to_csv(&src_report),
        )?;
        fs::write(
            dir.join(format!("metrics-target-{}.csv", i)),
            report_to_csv(&tgt_report),
        )?;
        write_reports(
            &dir,
            &format!("report-target-{}", i),
            &format!("transfer of {}", path.display()),
            &tgt_eval.samples,
            &target.vocab,
            a.report_samples,
        )?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i,
            path.display(),
            cell(rationale_mean(&src_report, "attack_rate")),
            cell(rationale_mean(&tgt_report, "attack_rate")),
            cell(rationale_mean(&src_report, "gold_jaccard_drop")),
            cell(rationale_mean(&tgt_report, "gold_jaccard_drop")),
            tgt_report.accuracy.delta_acc_abs,
        ));
        println!("{}:", path.display());
        println!("  source: {}", headline(&src_report));
        println!("  target: {}", headline(&tgt_report));
    }
    fs::write(dir.join("transfer.csv"), csv)?;
    Ok(())
}

fn ablate_run(a: AblateArgs) -> Result<()> {
    let dir = create_run_dir(&a.out, &a.run_name, "ablate")?;
    write_config(&dir, &Command::Ablate(a.clone()))?;
    let d = load_data(&a.data)?;
    let bundle = load_bundle(&a.model)?;
    let shape = a.shape.to_shape()?;

    let measures = [Measure::Mse, Measure::Mae, Measure::MseZ];
    let queries = [QueryMethod::KdTree, QueryMethod::Random, QueryMethod::HotFlip];
    let mut csv = String::from(
        "measure,query,rounds,evaluations,initial_loss,final_loss,improvement,\
         acc_clean,acc_adv,delta_acc_abs,attack_rate,gold_jaccard_drop\n",
    );
    for measure in measures {
        for query in queries {
            let label = format!("{}-{}", measure.name(), query.name());
            let scored = search_and_score(
                &bundle,
                &d,
                &a.search_split,
                &a.eval_split,
                a.mode,
                measure,
                query,
                shape.clone(),
                &a.search,
                a.seed,
            )
            .with_context(|| format!("cell {}", label))?;
            scored
                .outcome
                .triggers
                .save(&dir.join(format!("triggers-{}.json", label)))
                .context("saving the trigger set")?;
            fs::write(
                dir.join(format!("metrics-{}.csv", label)),
                report_to_csv(&scored.report),
            )?;
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                measure.name(),
                query.name(),
                scored.outcome.rounds.len(),
                scored.outcome.evaluations,
                scored.outcome.initial_loss,
                scored.outcome.final_loss,
                scored.outcome.initial_loss - scored.outcome.final_loss,
                scored.report.accuracy.acc_clean,
                scored.report.accuracy.acc_adv,
                scored.report.accuracy.delta_acc_abs,
                cell(rationale_mean(&scored.report, "attack_rate")),
                cell(rationale_mean(&scored.report, "gold_jaccard_drop")),
            ));
            println!(
                "{}: loss {:.4} -> {:.4} in {:.1}s; {}",
                label,
                scored.outcome.initial_loss,
                scored.outcome.final_loss,
                scored.seconds,
                headline(&scored.report)
            );
        }
    }
    fs::write(dir.join("ablation.csv"), csv)?;
    Ok(())
}

/// `K-n` with default insertion points, or `K[p1,p2,...]-n` with explicit
/// ones; `-1` means document end.
fn parse_cell(label: &str) -> std::result::Result<TriggerShape, String> {
    let bad = |msg: &str| format!("cell {:?}: {}", label, msg);
    let (positions, tail) = match label.find('[') {
        Some(open) => {
            let close = label[open..]
                .find(']')
                .map(|c| open + c)
                .ok_or_else(|| bad("missing ]"))?;
            let groups: usize = label[..open]
                .parse()
                .map_err(|_| bad("group count must be an integer"))?;
            let positions = label[open + 1..close]
                .split(',')
                .map(|p| p.trim().parse::<i64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("insertion points must be integers"))?;
            if positions.len() != groups {
                return Err(bad(&format!(
                    "{} groups but {} insertion points",
                    groups,
                    positions.len()
                )));
            }
            (positions, &label[close + 1..])
        }
        None => {
            let (g, n) = label.split_once('-').ok_or_else(|| bad("expected K-n"))?;
            let groups: usize = g.parse().map_err(|_| bad("group count must be an integer"))?;
            let positions = default_positions(groups).ok_or_else(|| {
                bad(&format!("no default insertion points for {} groups", groups))
            })?;
            return finish_cell(label, positions, n);
        }
    };
    let n = tail
        .strip_prefix('-')
        .ok_or_else(|| bad("expected -n after ]"))?;
    finish_cell(label, positions, n)
}

fn finish_cell(
    label: &str,
    positions: Vec<i64>,
    n: &str,
) -> std::result::Result<TriggerShape, String> {
    let tokens_per_group: usize = n
        .parse()
        .map_err(|_| format!("cell {:?}: group size must be an integer", label))?;
    let shape = TriggerShape {
        positions,
        tokens_per_group,
    };
    shape
        .validate()
        .map_err(|e| format!("cell {:?}: {}", label, e))?;
    Ok(shape)
}

fn sweep_run(a: SweepArgs) -> Result<()> {
    let dir = create_run_dir(&a.out, &a.run_name, "sweep")?;
    write_config(&dir, &Command::Sweep(a.clone()))?;
    let d = load_data(&a.data)?;
    let bundle = load_bundle(&a.model)?;

    let mut csv = String::from(
        "cell,groups,tokens_per_group,positions,initial_loss,final_loss,\
         delta_acc_abs,attack_rate,gold_jaccard_drop,gold_jaccard_drop_rel\n",
    );
    let mut rows = 0usize;
    for label in &a.cell {
        let shape = match parse_cell(label) {
            Ok(s) => s,
            Err(msg) => {
                log::warn!("skipping {}", msg);
                continue;
            }
        };
        let scored = match search_and_score(
            &bundle,
            &d,
            &a.search_split,
            &a.eval_split,
            a.mode,
            a.measure,
            a.query,
            shape.clone(),
            &a.search,
            a.seed,
        ) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("skipping cell {:?}: {:#}", label, e);
                continue;
            }
        };
        scored
            .outcome
            .triggers
            .save(&dir.join(format!("triggers-{}.json", label)))
            .context("saving the trigger set")?;
        fs::write(
            dir.join(format!("metrics-{}.csv", label)),
            report_to_csv(&scored.report),
        )?;
        let positions = shape
            .positions
            .iter()
            .map(|p| p.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            label,
            shape.positions.len(),
            shape.tokens_per_group,
            positions,
            scored.outcome.initial_loss,
            scored.outcome.final_loss,
            scored.report.accuracy.delta_acc_abs,
            cell(rationale_mean(&scored.report, "attack_rate")),
            cell(rationale_mean(&scored.report, "gold_jaccard_drop")),
            cell(rationale_mean(&scored.report, "gold_jaccard_drop_rel")),
        ));
        rows += 1;
        println!("{}: {}", label, headline(&scored.report));
    }
    if rows == 0 {
        bail!("every cell was invalid");
    }
    fs::write(dir.join("sweep.csv"), csv)?;
    println!("{} of {} cells done: {}", rows, a.cell.len(), dir.join("sweep.csv").display());
    Ok(())
}

fn rerun(a: RerunArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config)
        .with_context(|| format!("reading {}", a.config.display()))?;
    let mut cmd: Command = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", a.config.display()))?;
    if matches!(cmd, Command::Rerun(_)) {
        bail!("snapshot replays a rerun; point --config at the original run");
    }
    apply_overrides(&mut cmd, a.out, a.run_name)?;
    log::info!("replaying {}", a.config.display());
    dispatch(cmd)
}

fn apply_overrides(
    cmd: &mut Command,
    out: Option<std::path::PathBuf>,
    run_name: Option<String>,
) -> Result<()> {
    let (o, r) = match cmd {
        Command::GenData(g) => {
            if let Some(v) = out {
                g.out = v;
            }
            if run_name.is_some() {
                bail!("gen-data runs have no run name");
            }
            return Ok(());
        }
        Command::Train(x) => (&mut x.out, &mut x.run_name),
        Command::Attack(x) => (&mut x.out, &mut x.run_name),
        Command::Evaluate(x) => (&mut x.out, &mut x.run_name),
        Command::Transfer(x) => (&mut x.out, &mut x.run_name),
        Command::Ablate(x) => (&mut x.out, &mut x.run_name),
        Command::Sweep(x) => (&mut x.out, &mut x.run_name),
        Command::Rerun(_) => unreachable!("rejected above"),
    };
    if let Some(v) = out {
        *o = v;
    }
    if let Some(v) = run_name {
        *r = Some(v);
    }
    Ok(())
}
