//! The `ncp` subcommands. Every output is a pure function of the config,
//! seeds and inputs, so reruns reproduce artifacts byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ncp_core::checkpoint::Checkpoint;
use ncp_core::convhead::{standardize, visual_backprop};
use ncp_core::dynamics::SolverConfig;
use ncp_core::image::write_pgm;
use ncp_core::metrics::{self, fmt_num, summarize, MetricReport, Summary};
use ncp_core::network::{Policy, SequenceInput};
use ncp_core::simworld::{
    add_gaussian_noise, episode_plan, frame_noise_seed, generate_episode, generate_track, run_closed_loop, split_episodes, Episode,
    EpisodeConfig, EpisodeData, FrameWindows, NetworkController, Theme, Track,
};
use ncp_core::trainer::{train, TrainHistory};
use ncp_core::wiring::count_parameters;
use ncp_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub theme: Theme,
    pub track_seed: u64,
    pub episode_seed: u64,
    pub frames: usize,
    pub frames_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seeds: String,
    pub n_episodes: usize,
    pub summer: usize,
    pub winter: usize,
    pub episodes: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// Renders expert drives into `out/episode_NNNN/` and writes a manifest.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    create_dir(out)?;
    let mut entries = Vec::new();
    for (i, (theme, track_seed, episode_seed)) in episode_plan(&cfg.data).into_iter().enumerate() {
        let ep = generate_episode(&cfg.data, track_seed, theme, episode_seed)?;
        let dir = format!("episode_{i:04}");
        ep.write_dir(&out.join(&dir))?;
        let blob = fs::read(out.join(&dir).join("frames.bin")).map_err(|e| Error::io(out.join(&dir), e))?;
        eprintln!("{dir}: {theme}, {} frames", ep.len());
        entries.push(ManifestEntry {
            dir,
            theme,
            track_seed,
            episode_seed,
            frames: ep.len(),
            frames_sha256: sha256_hex(&blob),
        });
    }
    let count = |t: Theme| entries.iter().filter(|e| e.theme == t).count();
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seeds: cfg.seed_list(),
        n_episodes: entries.len(),
        summer: count(Theme::Summer),
        winter: count(Theme::Winter),
        episodes: entries,
    };
    write(&out.join(MANIFEST), serde_json::to_string_pretty(&manifest).unwrap() + "\n")?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<EpisodeData>> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
    manifest.episodes.iter().map(|e| EpisodeData::read_dir(&dir.join(&e.dir))).collect()
}

pub fn history_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("history.csv")
}

pub fn parameter_summary(policy: &Policy<f64>) -> String {
    let rnn = count_parameters(&policy.wiring, policy.kind());
    format!(
        "{} with {} neurons and {} synapses: {} recurrent parameters (+{} conv head, +2 read-out)",
        policy.kind(),
        policy.wiring.n_neurons(),
        policy.wiring.n_synapses(),
        rnn,
        policy.head.as_ref().map_or(0, |h| h.params.len())
    )
}

/// Trains on a generated dataset and writes the checkpoint plus a history
/// CSV next to it. On divergence the partial history is still written.
pub fn train_cmd(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<Checkpoint> {
    let episodes = load_dataset(data)?;
    let (tr, va) = split_episodes(episodes.len(), cfg.train.val_fraction, cfg.train.seed);
    let train_set = FrameWindows::new(tr.iter().map(|&i| &episodes[i]).collect(), cfg.train.sequence_length);
    let val_set = FrameWindows::new(va.iter().map(|&i| &episodes[i]).collect(), cfg.train.sequence_length);
    let policy = cfg.init_policy()?;
    eprintln!("parameters: {}", parameter_summary(&policy));
    let mut history = TrainHistory::default();
    let result = train(policy, &train_set, &val_set, &cfg.train, &mut history);
    let mut csv = Vec::new();
    history.write_csv(&mut csv).unwrap();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write(&history_path(out), csv)?;
    let outcome = result?;
    for e in 0..history.len() {
        eprintln!("epoch {e}: train {:.3e} val {:.3e}", history.train_loss[e], history.val_loss[e]);
    }
    let meta = serde_json::json!({
        "experiment": cfg,
        "config_hash": cfg.hash(),
        "seeds": cfg.seed_list(),
    });
    let ckpt = Checkpoint::from_policy(&outcome.policy, cfg.train.clone(), outcome.selected_epoch, history, meta);
    ckpt.save(out)?;
    Ok(ckpt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    OpenLoop,
    ClosedLoop,
}

/// Per-episode metric values; NaN where a metric does not apply.
#[derive(Debug, Clone, Copy)]
struct EpisodeMetrics {
    theme: Theme,
    mse: f64,
    weighted_mse: f64,
    crashed: f64,
    lipschitz: f64,
    activity: f64,
    similarity: f64,
}

fn finite_summary(values: impl Iterator<Item = f64>) -> Summary {
    let v: Vec<f64> = values.filter(|x| !x.is_nan()).collect();
    summarize(&v)
}

fn report_of(rows: &[&EpisodeMetrics]) -> MetricReport {
    let s = |f: fn(&EpisodeMetrics) -> f64| finite_summary(rows.iter().map(|r| f(r)));
    MetricReport {
        mse: s(|r| r.mse),
        weighted_mse: s(|r| r.weighted_mse),
        crash_likelihood: s(|r| r.crashed),
        lipschitz: s(|r| r.lipschitz),
        mean_ssim: Summary {
            mean: f64::NAN,
            std: f64::NAN,
        },
        activity_correlation: s(|r| r.activity),
        trajectory_similarity: s(|r| r.similarity),
    }
}

pub const REPORT_HEADER_PREFIX: &str = "model,mode,noise_variance,theme,episodes";

fn report_header() -> String {
    format!("{REPORT_HEADER_PREFIX},{},config_hash,seeds\n", MetricReport::csv_header())
}

fn report_row(out: &mut String, model: &str, mode: &str, noise: f64, theme: &str, rows: &[&EpisodeMetrics], cfg: &ExperimentConfig) {
    let mut fields = Vec::new();
    report_of(rows).write_csv_fields(&mut fields).unwrap();
    writeln!(
        out,
        "{model},{mode},{},{theme},{},{},{},{}",
        fmt_num(noise),
        rows.len(),
        String::from_utf8(fields).unwrap(),
        cfg.hash(),
        cfg.seed_list()
    )
    .unwrap();
}

fn noise_dir(out: &Path, noise: f64) -> PathBuf {
    out.join(format!("noise_{}", fmt_num(noise)))
}

fn eval_tracks(cfg: &ExperimentConfig) -> Result<Vec<Track>> {
    let themes = &cfg.data.themes;
    (0..cfg.eval.n_episodes)
        .map(|k| generate_track(cfg.eval.track_seed + k as u64, &cfg.eval.track, themes[k % themes.len()]))
        .collect()
}

fn activity_traces(ep: &Episode) -> Vec<Vec<f64>> {
    let n = ep.activities.first().map_or(0, Vec::len);
    (0..n).map(|i| ep.activities.iter().map(|a| a[i]).collect()).collect()
}

fn road_curvature(ep: &Episode, track: &Track) -> Vec<f64> {
    ep.states.iter().map(|s| track.curvature_at(s.s)).collect()
}

fn closed_loop_episode(
    cfg: &ExperimentConfig,
    policy: &Policy<f64>,
    solver: &SolverConfig,
    track: &Track,
    noise: f64,
    k: usize,
) -> Episode {
    let mut controller = NetworkController::new(policy.clone(), *solver);
    let ep_cfg = EpisodeConfig {
        noise_variance: noise,
        noise_seed: cfg.eval.noise_seed + k as u64,
        max_steps: cfg.eval.max_steps,
        lookahead: cfg.data.lookahead,
        record_frames: false,
    };
    run_closed_loop(&mut controller, track, &cfg.data.vehicle, &cfg.data.render, &ep_cfg)
}

/// Writes `report.csv` (one row per noise level), `report_by_theme.csv`
/// and per-episode logs under `out/noise_<v>/`.
pub fn eval_cmd(cfg: &ExperimentConfig, ckpt: &Checkpoint, mode: EvalMode, data: Option<&Path>, out: &Path) -> Result<String> {
    let policy: Policy<f64> = ckpt.policy()?;
    let solver = ckpt.header.train.solver;
    let model = cfg.name.as_str();
    let frame_dt = cfg.data.vehicle.frame_dt;
    create_dir(out)?;
    let mut by_noise: Vec<(f64, Vec<EpisodeMetrics>)> = Vec::new();
    match mode {
        EvalMode::ClosedLoop => {
            let tracks = eval_tracks(cfg)?;
            let clean: Vec<Episode> = tracks
                .iter()
                .enumerate()
                .map(|(k, t)| closed_loop_episode(cfg, &policy, &solver, t, 0.0, k))
                .collect();
            for &noise in &cfg.eval.noise_variances {
                let dir = noise_dir(out, noise);
                create_dir(&dir)?;
                let mut rows = Vec::new();
                for (k, track) in tracks.iter().enumerate() {
                    let fresh;
                    let ep = if noise == 0.0 {
                        &clean[k]
                    } else {
                        fresh = closed_loop_episode(cfg, &policy, &solver, track, noise, k);
                        &fresh
                    };
                    let mut csv = Vec::new();
                    ep.write_csv(&mut csv, track).unwrap();
                    write(&dir.join(format!("episode_{k:04}.csv")), csv)?;
                    let curvature = road_curvature(ep, track);
                    rows.push(EpisodeMetrics {
                        theme: track.theme,
                        mse: metrics::mse(&ep.predictions, &ep.labels).unwrap_or(f64::NAN),
                        weighted_mse: metrics::weighted_mse(&ep.predictions, &ep.labels).unwrap_or(f64::NAN),
                        crashed: if ep.crashed { 1.0 } else { 0.0 },
                        lipschitz: metrics::lipschitz(&ep.predictions, frame_dt).unwrap_or(f64::NAN),
                        activity: metrics::activity_correlation_lagged(&activity_traces(ep), &curvature, cfg.eval.activity_max_lag)
                            .unwrap_or(f64::NAN),
                        similarity: metrics::trajectory_similarity(&clean[k].lateral_offsets(), &ep.lateral_offsets()).unwrap_or(f64::NAN),
                    });
                }
                let crashes = rows.iter().filter(|r| r.crashed > 0.0).count();
                eprintln!("{model} closed loop, noise {noise}: {crashes}/{} crashed", rows.len());
                by_noise.push((noise, rows));
            }
        }
        EvalMode::OpenLoop => {
            let data = data.ok_or_else(|| Error::Config("open-loop evaluation needs --data".into()))?;
            let episodes = load_dataset(data)?;
            for &noise in &cfg.eval.noise_variances {
                let dir = noise_dir(out, noise);
                create_dir(&dir)?;
                let mut rows = Vec::new();
                for (k, ep) in episodes.iter().enumerate() {
                    let stream = cfg.eval.noise_seed + k as u64;
                    let frames = (0..ep.len())
                        .map(|t| standardize(&add_gaussian_noise(&ep.image(t), noise, frame_noise_seed(stream, t as u64))))
                        .collect();
                    let pred = policy.predict(&SequenceInput::Frames(frames), &solver)?.outputs;
                    let mut csv = String::from("t,label,prediction\n");
                    for t in 0..pred.len() {
                        writeln!(csv, "{t},{},{}", fmt_num(ep.labels[t]), fmt_num(pred[t])).unwrap();
                    }
                    write(&dir.join(format!("episode_{k:04}.csv")), csv)?;
                    rows.push(EpisodeMetrics {
                        theme: ep.meta.theme,
                        mse: metrics::mse(&pred, &ep.labels)?,
                        weighted_mse: metrics::weighted_mse(&pred, &ep.labels)?,
                        crashed: f64::NAN,
                        lipschitz: metrics::lipschitz(&pred, frame_dt).unwrap_or(f64::NAN),
                        activity: f64::NAN,
                        similarity: f64::NAN,
                    });
                }
                by_noise.push((noise, rows));
            }
        }
    }
    let mode_name = match mode {
        EvalMode::OpenLoop => "openloop",
        EvalMode::ClosedLoop => "closedloop",
    };
    let mut report = report_header();
    let mut by_theme = report_header();
    for (noise, rows) in &by_noise {
        let all: Vec<&EpisodeMetrics> = rows.iter().collect();
        report_row(&mut report, model, mode_name, *noise, "all", &all, cfg);
        for theme in Theme::ALL {
            let subset: Vec<&EpisodeMetrics> = rows.iter().filter(|r| r.theme == theme).collect();
            if !subset.is_empty() {
                report_row(&mut by_theme, model, mode_name, *noise, theme.name(), &subset, cfg);
            }
        }
    }
    write(&out.join("report.csv"), &report)?;
    write(&out.join("report_by_theme.csv"), &by_theme)?;
    Ok(report)
}

/// Evenly spaced `(episode, frame)` picks across a dataset.
fn pick_frames(episodes: &[EpisodeData], n: usize) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.len()).map(move |t| (e, t)))
        .collect();
    if all.is_empty() || n == 0 {
        return Vec::new();
    }
    let n = n.min(all.len());
    (0..n).map(|i| all[i * all.len() / n]).collect()
}

fn saliency_map(policy: &Policy<f64>, image: &ncp_core::image::Image) -> Result<Vec<f64>> {
    let (_, maps) = policy.sense(&standardize(image))?;
    Ok(visual_backprop(&maps, image.height, image.width).data)
}

fn write_map(path: &Path, width: usize, height: usize, map: &[f64]) -> Result<()> {
    let mut buf = Vec::new();
    write_pgm(&mut buf, width, height, map).unwrap();
    write(path, buf)
}

/// Clean versus noisy VisualBackprop maps and their SSIM. Returns the
/// per-variance `(variance, summary)` pairs.
pub fn saliency_cmd(cfg: &ExperimentConfig, ckpt: &Checkpoint, data: &Path, out: &Path) -> Result<Vec<(f64, Summary)>> {
    let policy: Policy<f64> = ckpt.policy()?;
    if policy.head.is_none() {
        return Err(Error::Config("saliency needs a checkpoint with a conv head".into()));
    }
    let episodes = load_dataset(data)?;
    let picks = pick_frames(&episodes, cfg.eval.saliency_frames);
    let maps_dir = out.join("maps");
    create_dir(&maps_dir)?;
    let variances = &cfg.eval.noise_variances;
    let mut ssims = vec![Vec::with_capacity(picks.len()); variances.len()];
    let mut csv = String::from("frame,episode,t");
    for v in variances {
        write!(csv, ",ssim_{}", fmt_num(*v)).unwrap();
    }
    csv.push('\n');
    for (i, &(e, t)) in picks.iter().enumerate() {
        let image = episodes[e].image(t);
        let (w, h) = (image.width, image.height);
        let clean = saliency_map(&policy, &image)?;
        write_map(&maps_dir.join(format!("frame_{i:04}_clean.pgm")), w, h, &clean)?;
        write!(csv, "{i},{e},{t}").unwrap();
        for (j, &v) in variances.iter().enumerate() {
            let noisy_image = add_gaussian_noise(&image, v, frame_noise_seed(cfg.eval.noise_seed, i as u64));
            let noisy = saliency_map(&policy, &noisy_image)?;
            write_map(&maps_dir.join(format!("frame_{i:04}_var_{}.pgm", fmt_num(v))), w, h, &noisy)?;
            let s = metrics::ssim(&clean, &noisy, w, h)?;
            ssims[j].push(s);
            write!(csv, ",{}", fmt_num(s)).unwrap();
        }
        csv.push('\n');
    }
    write(&out.join("saliency_ssim.csv"), &csv)?;
    let mut summary = String::from("model,noise_variance,frames,mean_ssim,std_ssim,config_hash,seeds\n");
    let mut result = Vec::new();
    for (j, &v) in variances.iter().enumerate() {
        let s = summarize(&ssims[j]);
        writeln!(
            summary,
            "{},{},{},{},{},{},{}",
            cfg.name,
            fmt_num(v),
            ssims[j].len(),
            fmt_num(s.mean),
            fmt_num(s.std),
            cfg.hash(),
            cfg.seed_list()
        )
        .unwrap();
        eprintln!("{} saliency, noise {v}: SSIM {:.4} +- {:.4}", cfg.name, s.mean, s.std);
        result.push((v, s));
    }
    write(&out.join("saliency_summary.csv"), &summary)?;
    Ok(result)
}

pub fn activity_summary_path(out: &Path) -> PathBuf {
    out.with_extension("summary.csv")
}

/// Noise-free drive on one track, logging every neuron's potential per
/// frame alongside the road curvature under the vehicle.
pub fn activity_cmd(cfg: &ExperimentConfig, ckpt: &Checkpoint, track_seed: u64, out: &Path) -> Result<f64> {
    let policy: Policy<f64> = ckpt.policy()?;
    let solver = ckpt.header.train.solver;
    let track = generate_track(track_seed, &cfg.eval.track, cfg.data.themes[0])?;
    let mut controller = NetworkController::new(policy, solver);
    let ep_cfg = EpisodeConfig {
        noise_variance: 0.0,
        noise_seed: cfg.eval.noise_seed,
        max_steps: cfg.eval.max_steps,
        lookahead: cfg.data.lookahead,
        record_frames: false,
    };
    let ep = run_closed_loop(&mut controller, &track, &cfg.data.vehicle, &cfg.data.render, &ep_cfg);
    let traces = activity_traces(&ep);
    let curvature = road_curvature(&ep, &track);
    let mut csv = String::from("t,s,d,curvature");
    for i in 0..traces.len() {
        write!(csv, ",x_{}", i + 1).unwrap();
    }
    csv.push('\n');
    for t in 0..ep.len() {
        write!(
            csv,
            "{t},{},{},{}",
            fmt_num(ep.states[t].s),
            fmt_num(ep.states[t].d),
            fmt_num(curvature[t])
        )
        .unwrap();
        for trace in &traces {
            write!(csv, ",{}", fmt_num(trace[t])).unwrap();
        }
        csv.push('\n');
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write(out, &csv)?;
    let corr = metrics::activity_correlation_lagged(&traces, &curvature, cfg.eval.activity_max_lag)?;
    let summary = format!(
        "model,track_seed,steps,neurons,max_lag,crashed,mean_abs_correlation,config_hash,seeds\n{},{},{},{},{},{},{},{},{}\n",
        cfg.name,
        track_seed,
        ep.len(),
        traces.len(),
        cfg.eval.activity_max_lag,
        ep.crashed,
        fmt_num(corr),
        cfg.hash(),
        cfg.seed_list()
    );
    write(&activity_summary_path(out), summary)?;
    eprintln!("{}: mean |corr| with curvature {corr:.3} over {} neurons", cfg.name, traces.len());
    Ok(corr)
}
