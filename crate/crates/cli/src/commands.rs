use std::path::{Path, PathBuf};

use ckafscil::data::{read_tensor, save_synth, synth_generate, Dataset, Tensor};
use ckafscil::protocol::{
    composition_retrieval, evaluate_sessions, importance_auc, importance_filter_eval,
    primitive_count_sweep, reuse_retention_eval, throughput_bench, ClassRetrieval, FilterPoint,
    RankBy, RetentionPoint, SweepRow,
};
use ckafscil::training::{train_base, train_incremental, ClassRecord};
use ckafscil::{
    cka_rc, linear_cka, ClassId, ClassifierWeights, FeatureMap, Head, Hyperparams, Matrix,
    ModelState, PrimitiveBank, SessionSchedule,
};
use rand::Rng;
use serde::Serialize;
use serde_json::json;

use crate::provenance::{sidecar, write_json, Provenance};
use crate::{CenteringArg, CliError, Command, RankArg};

pub fn run(command: Command, argv: &[String]) -> Result<(), CliError> {
    match command {
        Command::Gen { out, cfg, synth } => {
            let cfg = cfg.synth(&synth)?;
            let (ds, pool) = synth_generate(&cfg)?;
            save_synth(&out, &ds, &pool)?;
            Provenance::new("gen", argv, Some(cfg.seed), serde_json::to_value(&cfg)?)
                .output(&out)
                .write(&out.join("provenance.json"))?;
            println!(
                "wrote {} samples, {} classes, {} sessions to {}",
                ds.maps.len(),
                ds.manifest.classes.len(),
                ds.manifest.n_sessions(),
                out.display()
            );
            Ok(())
        }
        Command::TrainBase { data, out, cfg, hp } => {
            let dir = data.resolve()?;
            let hp = cfg.hyperparams(Hyperparams::default(), &hp)?;
            let ds = Dataset::load(&dir)?;
            let schedule = SessionSchedule::from_dataset(&ds)?;
            let state = train_base(&schedule.base, &ds.train(0), &hp)?;
            state.save(&out)?;
            Provenance::new(
                "train-base",
                argv,
                Some(hp.seed),
                serde_json::to_value(&hp)?,
            )
            .input(&dir)
            .output(&out)
            .write(&out.join("provenance.json"))?;
            print_losses(&state);
            Ok(())
        }
        Command::TrainInc {
            ckpt,
            data,
            out,
            session,
            cfg,
            hp,
        } => {
            let dir = data.resolve()?;
            let mut state = ModelState::load(&ckpt)?;
            let new_hp = cfg.hyperparams(state.hp.clone(), &hp)?;
            if new_hp.n_prims != state.hp.n_prims || new_hp.alpha != state.hp.alpha {
                return Err(CliError::Data(
                    "n_prims and alpha are fixed by the base session".into(),
                ));
            }
            state.hp = new_hp;
            let ds = Dataset::load(&dir)?;
            let total = ds.manifest.n_sessions();
            let sessions: Vec<u32> = match session {
                Some(k) if k != state.sessions_seen => {
                    return Err(CliError::Data(format!(
                        "checkpoint expects session {} next, not {k}",
                        state.sessions_seen
                    )))
                }
                Some(k) if k >= total => {
                    return Err(CliError::Data(format!("dataset has no session {k}")))
                }
                Some(k) => vec![k],
                None => (state.sessions_seen..total).collect(),
            };
            if sessions.is_empty() {
                return Err(CliError::Data(
                    "no incremental sessions left to train".into(),
                ));
            }
            for k in sessions {
                state = train_incremental(&state, &ds.train(k))?;
            }
            state.save(&out)?;
            Provenance::new(
                "train-inc",
                argv,
                Some(state.hp.seed),
                serde_json::to_value(&state.hp)?,
            )
            .input(&ckpt)
            .input(&dir)
            .output(&out)
            .write(&out.join("provenance.json"))?;
            print_losses(&state);
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            head,
            out,
        } => {
            let dir = data.resolve()?;
            let state = ModelState::load(&ckpt)?;
            let ds = Dataset::load(&dir)?;
            let head = Head::from(head);
            let report = evaluate_sessions(&state, &ds.test(), head)?;
            let out = out.unwrap_or_else(|| ckpt.join(format!("eval-{}.json", head.name())));
            write_json(&out, &report)?;
            provenance(
                "eval",
                argv,
                &state,
                json!({ "head": head }),
                &[&ckpt, &dir],
                &out,
            )?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Sweep {
            data,
            n_values,
            head,
            out,
            cfg,
            hp,
        } => {
            let dir = data.resolve()?;
            let hp = cfg.hyperparams(Hyperparams::default(), &hp)?;
            let ds = Dataset::load(&dir)?;
            let head = Head::from(head);
            let rows = primitive_count_sweep(&ds, &n_values, &hp, head)?;
            write_json(&out, &rows)?;
            Provenance::new(
                "sweep",
                argv,
                Some(hp.seed),
                json!({ "head": head, "hyperparams": hp }),
            )
            .input(&dir)
            .output(&out)
            .write(&sidecar(&out))?;
            print!("{}", sweep_table(&rows));
            Ok(())
        }
        Command::Importance {
            ckpt,
            data,
            keep,
            rank_by,
            top_k,
            out,
        } => {
            let dir = data.resolve()?;
            let state = ModelState::load(&ckpt)?;
            let ds = Dataset::load(&dir)?;
            let rank_by = match rank_by {
                RankArg::Predicted => RankBy::Predicted,
                RankArg::TrueLabel => RankBy::TrueLabel,
            };
            let test = reached(&ds, &state);
            let report = ImportanceReport {
                rank_by,
                filter: importance_filter_eval(&state, &test, &keep, rank_by)?,
                auc: match ds.manifest.annotations {
                    Some(_) => Some(importance_auc(&state, &ds, rank_by)?),
                    None => None,
                },
                retrieval: composition_retrieval(&state, &test, top_k)?,
            };
            let out = out.unwrap_or_else(|| ckpt.join("importance.json"));
            write_json(&out, &report)?;
            let config = json!({ "keep": keep, "rank_by": rank_by, "top_k": top_k });
            provenance("importance", argv, &state, config, &[&ckpt, &dir], &out)?;
            println!("keep  accuracy");
            for p in &report.filter {
                println!("{:>4}  {:8.2}", p.keep, p.accuracy);
            }
            if let Some(auc) = report.auc {
                println!("importance AUC: {auc:.4}");
            }
            Ok(())
        }
        Command::ReuseEval {
            ckpt,
            data,
            ratios,
            seed,
            out,
        } => {
            let dir = data.resolve()?;
            let state = ModelState::load(&ckpt)?;
            let ds = Dataset::load(&dir)?;
            let seed = seed.unwrap_or(state.hp.seed);
            let points = reuse_retention_eval(&state, &reached(&ds, &state), &ratios, seed)?;
            let report = ReuseReport { seed, points };
            let out = out.unwrap_or_else(|| ckpt.join("reuse.json"));
            write_json(&out, &report)?;
            let config = json!({ "ratios": ratios, "seed": seed });
            provenance("reuse-eval", argv, &state, config, &[&ckpt, &dir], &out)?;
            println!("ratio  accuracy  retention");
            for p in &report.points {
                println!("{:5.2}  {:8.2}  {:9.2}", p.ratio, p.accuracy, p.retention);
            }
            Ok(())
        }
        Command::CompareReps {
            a,
            b,
            centering,
            out,
        } => {
            let (ma, mb) = (load_rows(&a)?, load_rows(&b)?);
            let value = match centering {
                CenteringArg::Batch => cka_rc(&ma, &mb)?,
                CenteringArg::Row => linear_cka(&ma, &mb)?.value(),
            };
            println!("{value:?}");
            let centering = match centering {
                CenteringArg::Batch => "batch",
                CenteringArg::Row => "row",
            };
            let prov = Provenance::new(
                "compare-reps",
                argv,
                None,
                json!({ "centering": centering }),
            )
            .input(&a)
            .input(&b);
            match out {
                Some(out) => {
                    write_json(&out, &json!({ "cka": value, "centering": centering }))?;
                    prov.output(&out).write(&sidecar(&out))
                }
                None => prov.emit_stderr(),
            }
        }
        Command::Bench {
            classes,
            n_prims,
            patches,
            dim,
            maps,
            reps,
            seed,
            out,
        } => {
            if classes == 0 || n_prims == 0 || patches == 0 || dim < 2 || maps == 0 {
                return Err(CliError::Usage(
                    "bench sizes must be positive (dim at least 2)".into(),
                ));
            }
            let state = random_state(classes, n_prims, dim, seed)?;
            let mut rng = ckafscil::rng::substream(seed, "bench-maps", 0);
            let inputs: Vec<Matrix> = (0..maps)
                .map(|_| random_matrix(&mut rng, patches, dim))
                .collect::<Result<_, _>>()?;
            let report = throughput_bench(&state, &inputs, reps)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            let config = json!({
                "classes": classes, "n_prims": n_prims, "patches": patches,
                "dim": dim, "maps": maps, "reps": reps,
            });
            let prov = Provenance::new("bench", argv, Some(seed), config);
            match out {
                Some(out) => {
                    write_json(&out, &report)?;
                    prov.output(&out).write(&sidecar(&out))
                }
                None => prov.emit_stderr(),
            }
        }
    }
}

#[derive(Serialize)]
struct ImportanceReport {
    rank_by: RankBy,
    filter: Vec<FilterPoint>,
    auc: Option<f64>,
    retrieval: Vec<ClassRetrieval>,
}

#[derive(Serialize)]
struct ReuseReport {
    seed: u64,
    points: Vec<RetentionPoint>,
}

fn provenance(
    command: &str,
    argv: &[String],
    state: &ModelState,
    config: serde_json::Value,
    inputs: &[&PathBuf],
    out: &Path,
) -> Result<(), CliError> {
    let config = json!({ "run": config, "hyperparams": state.hp });
    let mut p = Provenance::new(command, argv, Some(state.hp.seed), config);
    for i in inputs {
        p = p.input(i);
    }
    p.output(out).write(&sidecar(out))
}

/// Test samples of the sessions a checkpoint has been trained on.
fn reached(ds: &Dataset, state: &ModelState) -> Vec<FeatureMap> {
    ds.test()
        .into_iter()
        .filter(|m| m.session < state.sessions_seen.max(1))
        .collect()
}

fn print_losses(state: &ModelState) {
    for log in &state.history {
        match (log.epoch_losses.first(), log.epoch_losses.last()) {
            (Some(first), Some(last)) => println!(
                "session {}: {} epochs, loss {first:.4} -> {last:.4}",
                log.session,
                log.epoch_losses.len()
            ),
            _ => println!("session {}: no training steps", log.session),
        }
    }
}

fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("n_prims  final  PD\n");
    for r in rows {
        out.push_str(&format!(
            "{:>7}  {:5.2}  {:.2}\n",
            r.n_prims,
            r.report.final_overall(),
            r.report.pd
        ));
    }
    out
}

/// Reads a 2-D tensor, or a 3-D one flattened to `dims[0] × rest`.
fn load_rows(path: &Path) -> Result<Matrix, CliError> {
    let t: Tensor = read_tensor(path)?;
    match t.dims() {
        [_, _] => Ok(t.to_matrix()?),
        [n, rest @ ..] if !rest.is_empty() => {
            let cols = rest.iter().product();
            Ok(Matrix::new(*n, cols, t.to_f64())?)
        }
        dims => Err(CliError::Data(format!(
            "{}: expected at least 2 dimensions, found {}",
            path.display(),
            dims.len()
        ))),
    }
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> ckafscil::Result<Matrix> {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random::<f64>()).collect(),
    )
}

fn random_state(
    classes: usize,
    n_prims: usize,
    dim: usize,
    seed: u64,
) -> Result<ModelState, CliError> {
    let mut rng = ckafscil::rng::substream(seed, "bench-bank", 0);
    let ids: Vec<ClassId> = (0..classes as u32).map(ClassId).collect();
    let blocks = (0..classes)
        .map(|_| random_matrix(&mut rng, n_prims, dim))
        .collect::<Result<Vec<_>, _>>()?;
    let bank = PrimitiveBank::new(ids.clone(), blocks, vec![true; classes])?;
    let weights = ClassifierWeights::new(
        ids.clone(),
        random_matrix(&mut rng, classes, dim)?,
        vec![true; classes],
    )?;
    Ok(ModelState {
        bank,
        weights,
        hp: Hyperparams {
            n_prims,
            ..Hyperparams::default()
        },
        sessions_seen: 1,
        registry: ids
            .into_iter()
            .map(|class| ClassRecord { class, session: 0 })
            .collect(),
        history: Vec::new(),
    })
}
