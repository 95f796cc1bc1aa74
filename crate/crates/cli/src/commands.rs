use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dsc_core::config::RunConfig;
use dsc_core::convert::{ConversionRequest, Converter};
use dsc_core::corpus::phones::vocab_size;
use dsc_core::corpus::{
    extract_all, load_speaker, load_synthesis, parse_manifest, synth_corpus, FeatureSet, UtteranceRecord,
};
use dsc_core::dsp::cache::{self, FeatureKind};
use dsc_core::dsp::{read_wav, write_wav};
use dsc_core::error::StageExt;
use dsc_core::model::{latest_checkpoint, resume, train_model, AcousticModel, CheckpointSink, FeatureNorm};
use dsc_core::rng::substream;
use dsc_core::speaker::{
    adjusted_rand_index, cosine_score, eer, hac_cluster, parse_trials, sidecar_path, train_embedder, LabeledFrames,
    SpeakerEncoder,
};
use dsc_core::workflow::{model_input, speaker_classes, speaker_mean_dvectors, train_items, utterance_dvectors};
use dsc_core::Error;
use log::{info, warn};
use serde_json::{json, Value};

use crate::{resolve_config, CacheArg, Cli, Command};

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::SynthCorpus { out, speakers, utts } => {
            let mut extra = Vec::new();
            if let Some(n) = speakers {
                extra.push(("corpus.speakers".to_string(), n.to_string()));
            }
            if let Some(n) = utts {
                extra.push(("corpus.utts".to_string(), n.to_string()));
            }
            synth(&resolve_config(g, &extra)?, &out)
        }
        Command::Extract {
            manifest,
            cache,
            branch,
            workers,
        } => {
            let extra: Vec<_> = workers
                .map(|w| ("workers".to_string(), w.to_string()))
                .into_iter()
                .collect();
            extract(&resolve_config(g, &extra)?, &manifest, &cache, branch.into())
        }
        Command::TrainEmbed {
            manifest,
            cache,
            labels,
            out,
        } => train_embed(&resolve_config(g, &[])?, &manifest, &cache, labels.as_deref(), &out),
        Command::Cluster {
            manifest,
            cache,
            embed,
            k,
            unlabeled,
            out,
        } => cluster(&resolve_config(g, &[])?, &manifest, &cache, &embed, k, unlabeled, &out),
        Command::TrainModel {
            manifest,
            cache,
            embed,
            out,
            resume,
        } => train(&resolve_config(g, &[])?, &manifest, &cache, &embed, &out, resume),
        Command::Convert {
            source,
            manifest,
            id,
            enroll,
            ckpt,
            embed,
            out,
            shift,
            nu,
            allow_out_of_band,
        } => {
            let cfg = resolve_config(g, &[])?;
            let args = ConvertArgs {
                source: &source,
                manifest: &manifest,
                id: id.as_deref(),
                enroll: &enroll,
                ckpt: &ckpt,
                embed: embed.as_deref(),
                out: &out,
            };
            convert(&cfg, args, shift.into(), nu, allow_out_of_band)
        }
        Command::Eval {
            trials,
            embeddings,
            embed,
            pred,
            model,
            manifest,
            cache,
            out,
        } => {
            let cfg = resolve_config(g, &[])?;
            let args = EvalArgs {
                trials: trials.as_deref(),
                embeddings: embeddings.as_deref(),
                embed: embed.as_deref(),
                pred: pred.as_deref(),
                model: model.as_deref(),
                manifest: manifest.as_deref(),
                cache: &cache,
                out: out.as_deref(),
            };
            eval(&cfg, args)
        }
    }
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::invalid(msg).into()
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// `--cache`, else `$DSC_CACHE_DIR`, else `cache/` beside the manifest.
fn cache_dir(arg: &CacheArg, manifest: &Path) -> PathBuf {
    arg.dir
        .clone()
        .or_else(|| std::env::var_os("DSC_CACHE_DIR").map(PathBuf::from))
        .unwrap_or_else(|| manifest_dir(manifest).join("cache"))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

/// `run.json` recording the resolved configuration of whatever wrote `dir`.
fn write_run(dir: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    let config: serde_json::Map<String, Value> = cfg
        .pairs()
        .into_iter()
        .map(|(k, v)| (k.to_string(), Value::String(v)))
        .collect();
    write_json(
        &dir.join("run.json"),
        &json!({ "command": command, "config_hash": cfg.hash(), "config": config }),
    )
}

fn load_records(manifest: &Path) -> Result<Vec<UtteranceRecord>> {
    let records = parse_manifest(manifest)?;
    if records.is_empty() {
        return Err(invalid(format!("{}: manifest has no records", manifest.display())));
    }
    Ok(records)
}

/// Model checkpoint path from a file or a training directory.
fn model_path(ckpt: &Path) -> Result<PathBuf> {
    if ckpt.is_dir() {
        latest_checkpoint(ckpt)?.ok_or_else(|| invalid(format!("no model checkpoint in {}", ckpt.display())))
    } else {
        Ok(ckpt.to_path_buf())
    }
}

fn default_embedder(model: &Path) -> PathBuf {
    manifest_dir(model).join("embedder.dsc")
}

fn copy_checkpoint(from: &Path, to: &Path) -> Result<()> {
    if to.exists() && fs::canonicalize(from)? == fs::canonicalize(to)? {
        return Ok(());
    }
    fs::copy(from, to).with_context(|| format!("copying {}", from.display()))?;
    fs::copy(sidecar_path(from), sidecar_path(to))?;
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = synth_corpus(&cfg.synth_options(), out)?;
    write_run(out, cfg, "synth-corpus")?;
    let summary = json!({
        "config_hash": cfg.hash(),
        "manifest": corpus.manifest,
        "records": corpus.records.len(),
        "speakers": corpus.speakers.len(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn extract(cfg: &RunConfig, manifest: &Path, cache: &CacheArg, branch: dsc_core::corpus::Branch) -> Result<()> {
    let records = load_records(manifest)?;
    let dir = cache_dir(cache, manifest);
    let workers = match cfg.workers {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        n => n,
    };
    let s = extract_all(
        &cfg.extractor()?,
        &records,
        &manifest_dir(manifest),
        &dir,
        branch,
        workers,
    )?;
    write_run(&dir, cfg, "extract")?;
    let failed: BTreeMap<&str, &str> = s.failed.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let summary = json!({
        "config_hash": cfg.hash(),
        "cache": dir,
        "extracted": s.extracted,
        "up_to_date": s.up_to_date,
        "failed": failed,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if !s.failed.is_empty() {
        return Err(invalid(format!(
            "{} of {} records failed extraction",
            s.failed.len(),
            records.len()
        )));
    }
    Ok(())
}

/// Cluster labels keyed by record id.
fn read_labels(path: &Path) -> Result<BTreeMap<String, u64>> {
    let v = read_json(path)?;
    let labels = v
        .get("labels")
        .and_then(Value::as_object)
        .ok_or_else(|| invalid(format!("{}: missing `labels` object", path.display())))?;
    labels
        .iter()
        .map(|(id, l)| {
            l.as_u64()
                .map(|l| (id.clone(), l))
                .ok_or_else(|| invalid(format!("{}: label of {id} is not an integer", path.display())))
        })
        .collect()
}

fn train_embed(cfg: &RunConfig, manifest: &Path, cache: &CacheArg, labels: Option<&Path>, out: &Path) -> Result<()> {
    let mut records = load_records(manifest)?;
    if let Some(path) = labels {
        let pseudo = read_labels(path)?;
        for r in records.iter_mut().filter(|r| r.speaker.is_none()) {
            r.speaker = pseudo.get(&r.id).map(|l| format!("cluster:{l}"));
        }
    }
    records.retain(|r| r.speaker.is_some());
    let (names, classes) = speaker_classes(&records);
    if names.len() < 2 {
        return Err(invalid("embedder training needs at least two speakers"));
    }
    let dir = cache_dir(cache, manifest);
    let data = records
        .iter()
        .zip(&classes)
        .map(|(r, c)| {
            Ok(LabeledFrames {
                label: c.expect("labelled records only"),
                frames: load_speaker(r, &dir)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    info!(
        "training embedder on {} utterances of {} speakers",
        data.len(),
        names.len()
    );
    let mut enc = SpeakerEncoder::new(cfg.embed_config(names.len()), &mut substream(cfg.seed, "embed/init"))?;
    let history = train_embedder(&mut enc, &data, &cfg.embed_train_config(), |s| {
        if s.step % 100 == 0 {
            info!("embed step {} loss {:.4} lr {:.2e}", s.step, s.loss, s.lr);
        }
    })
    .stage("train-embed")?;
    let last = history.last().map_or((0, f64::NAN), |s| (s.step, s.loss));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    enc.save(out, &cfg.hash(), last.0, last.1)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "config_hash": cfg.hash(),
            "checkpoint": out,
            "speakers": names.len(),
            "utterances": data.len(),
            "steps": last.0,
            "final_loss": last.1,
        }))?
    );
    Ok(())
}

fn cluster(
    cfg: &RunConfig,
    manifest: &Path,
    cache: &CacheArg,
    embed: &Path,
    k: usize,
    unlabeled: bool,
    out: &Path,
) -> Result<()> {
    let mut records = load_records(manifest)?;
    if unlabeled {
        records.retain(|r| r.speaker.is_none());
    }
    let enc = SpeakerEncoder::load(embed)?;
    let dvecs = utterance_dvectors(&enc, &records, &cache_dir(cache, manifest)).stage("embedding")?;
    let labels = hac_cluster(&dvecs, k).stage("clustering")?;
    let map: serde_json::Map<String, Value> = records
        .iter()
        .zip(&labels)
        .map(|(r, l)| (r.id.clone(), json!(l)))
        .collect();
    write_json(out, &json!({ "config_hash": cfg.hash(), "k": k, "labels": map }))?;
    info!("wrote {} labels in {k} clusters to {}", labels.len(), out.display());
    Ok(())
}

fn synthesis_features(records: &[UtteranceRecord], cache: &Path) -> dsc_core::Result<Vec<FeatureSet>> {
    records.iter().map(|r| load_synthesis(r, cache)).collect()
}

fn train(cfg: &RunConfig, manifest: &Path, cache: &CacheArg, embed: &Path, out: &Path, resume_run: bool) -> Result<()> {
    let records = load_records(manifest)?;
    let dir = cache_dir(cache, manifest);
    let features = synthesis_features(&records, &dir).stage("features")?;
    let enc = SpeakerEncoder::load(embed)?;
    if enc.net.config.embed_dim != cfg.embed_dim {
        return Err(invalid(format!(
            "embedder produces {}-d vectors but embed.dim is {}",
            enc.net.config.embed_dim, cfg.embed_dim
        )));
    }
    let dvecs = utterance_dvectors(&enc, &records, &dir).stage("embedding")?;
    let speakers = speaker_mean_dvectors(&records, &dvecs)?;
    let items = train_items(&records, &features, &speakers)?;
    let tcfg = cfg.model_train_config();

    fs::create_dir_all(out)?;
    let latest = if resume_run { latest_checkpoint(out)? } else { None };
    let (mut model, opt) = match latest {
        Some(path) => {
            let (model, opt, side) = resume(&path, tcfg.adam)?;
            if side.config_hash != cfg.hash() {
                warn!("resuming {} written under config {}", path.display(), side.config_hash);
            }
            info!("resuming from {} at step {}", path.display(), side.step);
            (model, Some(opt))
        }
        None => {
            if resume_run {
                warn!("no checkpoint in {}; starting fresh", out.display());
            }
            let norm = FeatureNorm::from_features(&features, cfg.f0_max as f32)?;
            (
                AcousticModel::new(cfg.model_config(vocab_size()), norm, cfg.seed)?,
                None,
            )
        }
    };
    copy_checkpoint(embed, &out.join("embedder.dsc"))?;
    write_run(out, cfg, "train-model")?;
    let sink = CheckpointSink {
        dir: out.to_path_buf(),
        config_hash: cfg.hash(),
    };
    let (_, history) = train_model(&mut model, opt, &items, &tcfg, Some(&sink), |_| {}).stage("train-model")?;
    let checkpoint = latest_checkpoint(out)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "config_hash": cfg.hash(),
            "checkpoint": checkpoint,
            "steps_run": history.len(),
            "first_loss": history.first().map(|s| s.loss),
            "final_loss": history.last().map(|s| s.loss),
        }))?
    );
    Ok(())
}

struct ConvertArgs<'a> {
    source: &'a Path,
    manifest: &'a Path,
    id: Option<&'a str>,
    enroll: &'a Path,
    ckpt: &'a Path,
    embed: Option<&'a Path>,
    out: &'a Path,
}

fn source_record(records: Vec<UtteranceRecord>, id: Option<&str>, source: &Path) -> Result<UtteranceRecord> {
    let found = match id {
        Some(id) => records.into_iter().find(|r| r.id == id),
        None if records.len() == 1 => records.into_iter().next(),
        None => records.into_iter().find(|r| r.wav.file_name() == source.file_name()),
    };
    found.ok_or_else(|| invalid(format!("no manifest record for {}; pass --id", source.display())))
}

fn convert(
    cfg: &RunConfig,
    a: ConvertArgs,
    policy: dsc_core::convert::ShiftPolicy,
    nu: Option<f64>,
    allow_out_of_band: bool,
) -> Result<()> {
    let rec = source_record(load_records(a.manifest)?, a.id, a.source)?;
    let ckpt = model_path(a.ckpt)?;
    let (model, side) = AcousticModel::load(&ckpt)?;
    let embed = a
        .embed
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_embedder(&ckpt));
    let enc = SpeakerEncoder::load(&embed)?;
    let features = cfg.extractor()?;
    let source = read_wav(a.source).stage("source-features")?;
    let enrollment = read_wav(a.enroll).stage("enrollment")?;

    let mut conv = Converter::new(&model, &enc, &features);
    conv.griffin_lim_iters = cfg.griffin_lim_iters;
    conv.enroll_floor_s = cfg.enroll_floor_s;
    conv.enroll_recommended_s = cfg.enroll_recommended_s;
    let out = conv.convert(&ConversionRequest {
        source: &source,
        phones: &rec.phones,
        enrollment: &enrollment,
        policy,
        nu_override: nu,
        allow_out_of_band,
    })?;

    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_wav(a.out, &out.audio)?;
    let mel_path = a.out.with_extension("dscf");
    cache::save(&mel_path, FeatureKind::Mel, &out.mel.frames)?;
    let r = &out.report;
    let report = json!({
        "config_hash": cfg.hash(),
        "model_config_hash": side.config_hash,
        "source": rec.id,
        "nu": r.nu,
        "source_mean_f0": r.source_mean_f0,
        "target_mean_f0": r.target_mean_f0,
        "shifted": r.shifted,
        "frames": r.frames,
        "stages_ms": r.stages_ms,
        "wav": a.out,
        "mel": mel_path,
    });
    write_json(&a.out.with_extension("json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

struct EvalArgs<'a> {
    trials: Option<&'a Path>,
    embeddings: Option<&'a Path>,
    embed: Option<&'a Path>,
    pred: Option<&'a Path>,
    model: Option<&'a Path>,
    manifest: Option<&'a Path>,
    cache: &'a CacheArg,
    out: Option<&'a Path>,
}

fn read_embeddings(path: &Path) -> Result<HashMap<String, Vec<f32>>> {
    let v = read_json(path)?;
    let obj = v
        .as_object()
        .ok_or_else(|| invalid(format!("{}: expected an object of id to vector", path.display())))?;
    obj.iter()
        .map(|(id, e)| {
            let vec = e
                .as_array()
                .and_then(|a| {
                    a.iter()
                        .map(|x| x.as_f64().map(|x| x as f32))
                        .collect::<Option<Vec<_>>>()
                })
                .ok_or_else(|| invalid(format!("{}: embedding of {id} is not a number array", path.display())))?;
            Ok((id.clone(), vec))
        })
        .collect()
}

fn eval(cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    let need_manifest = || {
        a.manifest
            .ok_or_else(|| invalid("--manifest is required for this evaluation"))
    };
    let mut report = serde_json::Map::new();
    report.insert("config_hash".into(), json!(cfg.hash()));

    if let Some(trials_path) = a.trials {
        let trials = parse_trials(&fs::read_to_string(trials_path)?, trials_path)?;
        let table = match (a.embeddings, a.embed) {
            (Some(path), _) => read_embeddings(path)?,
            (None, Some(embed)) => {
                let manifest = need_manifest()?;
                let ids: BTreeSet<&str> = trials
                    .iter()
                    .flat_map(|t| [t.enroll.as_str(), t.test.as_str()])
                    .collect();
                let records: Vec<_> = load_records(manifest)?
                    .into_iter()
                    .filter(|r| ids.contains(r.id.as_str()))
                    .collect();
                let enc = SpeakerEncoder::load(embed)?;
                let dvecs = utterance_dvectors(&enc, &records, &cache_dir(a.cache, manifest))?;
                records.into_iter().map(|r| r.id).zip(dvecs).collect()
            }
            (None, None) => return Err(invalid("--trials needs --embeddings or --embed")),
        };
        let get = |id: &str| table.get(id).ok_or_else(|| invalid(format!("no embedding for `{id}`")));
        let scores = trials
            .iter()
            .map(|t| Ok((cosine_score(get(&t.enroll)?, get(&t.test)?)?, t.target)))
            .collect::<Result<Vec<_>>>()?;
        report.insert("eer".into(), json!(eer(&scores)?));
        report.insert("trials".into(), json!(scores.len()));
    }

    if let Some(pred) = a.pred {
        let labels = read_labels(pred)?;
        let records = load_records(need_manifest()?)?;
        let (mut truth, mut guess) = (Vec::new(), Vec::new());
        for r in &records {
            if let (Some(s), Some(l)) = (&r.speaker, labels.get(&r.id)) {
                truth.push(s.as_str());
                guess.push(*l);
            }
        }
        if truth.is_empty() {
            return Err(invalid("no labelled manifest record has a predicted label"));
        }
        report.insert("ari".into(), json!(adjusted_rand_index(&truth, &guess)?));
        report.insert("clustered".into(), json!(truth.len()));
    }

    if let Some(model) = a.model {
        let manifest = need_manifest()?;
        let ckpt = model_path(model)?;
        let (model, _) = AcousticModel::load(&ckpt)?;
        let embed = a
            .embed
            .map(Path::to_path_buf)
            .unwrap_or_else(|| default_embedder(&ckpt));
        let enc = SpeakerEncoder::load(&embed)?;
        let records = load_records(manifest)?;
        let dir = cache_dir(a.cache, manifest);
        let features = synthesis_features(&records, &dir)?;
        let speakers = speaker_mean_dvectors(&records, &utterance_dvectors(&enc, &records, &dir)?)?;
        let (mut sum, mut count) = (0.0f64, 0usize);
        for ((r, f), s) in records.iter().zip(&features).zip(speakers) {
            let pred = model.infer(&model_input(r, f, s)).stage("acoustic-model")?;
            sum += pred
                .refined
                .data()
                .iter()
                .zip(f.mel.data())
                .map(|(p, t)| (p - t).abs() as f64)
                .sum::<f64>();
            count += f.mel.data().len();
        }
        report.insert("mel_l1".into(), json!(sum / count as f64));
        report.insert("utterances".into(), json!(records.len()));
    }

    if report.len() == 1 {
        return Err(invalid("nothing to evaluate: pass --trials, --pred or --model"));
    }
    let report = Value::Object(report);
    if let Some(out) = a.out {
        write_json(out, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
