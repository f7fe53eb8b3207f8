//! Run configuration, the unified objective, the optimization loop and the
//! finite-difference gradient harness.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classify;
use crate::datamodel::{generate, read_features, DatasetManifest, SynthSpec, VideoRecord};
use crate::diff::{checkpoint, finite_diff_check, AdamW, FdOptions, FdReport, Graph, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::model::{DsaNet, ModelConfig};
use crate::rng::{gaussian, seeded, shuffle};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const PRESETS: [&str; 3] = ["ucf-like", "xd-like", "desk"];
pub const SEED_ENV: &str = "DSANET_SEED";
pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_LOG_FILE: &str = "losses.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub beta: f64,
    #[serde(flatten)]
    pub model: ModelConfig,
    pub inference: InferenceConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self {
            preset: name.to_owned(),
            lambda: 1.1,
            lr: 7e-5,
            batch_size: 64,
            epochs: 10,
            weight_decay: 0.01,
            seed: 0,
            beta: 5.0,
            model: ModelConfig::default(),
            inference: InferenceConfig::default(),
        };
        match name {
            "ucf-like" => {}
            "xd-like" => {
                cfg.lambda = 5.0;
                cfg.lr = 1e-5;
                cfg.batch_size = 96;
                cfg.beta = 1.0;
                cfg.model.text.adapter_layers = 1;
                cfg.model.text.omega = 0.6;
            }
            "desk" => {
                cfg.lr = 3e-3;
                cfg.batch_size = 4;
                cfg.model.temporal.window = 4;
                cfg.model.temporal.sigma = 1.0;
                cfg.model.sgnm.k = 4;
                cfg.model.sgnm.decoder_layers = 2;
                cfg.model.text.layers = 2;
                cfg.model.text.adapter_layers = 2;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (expected one of {PRESETS:?})"
                )))
            }
        }
        Ok(cfg)
    }

    /// Parses a JSON object of flat dotted keys (`"temporal.window": 4`)
    /// layered over the preset named by its `preset` key (default `desk`).
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not JSON: {e}")))?;
        let Value::Object(map) = v else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let preset = match map.get("preset") {
            None => "desk",
            Some(Value::String(s)) => s.as_str(),
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
        };
        let mut cfg = Self::preset(preset)?;
        for (k, v) in &map {
            if k != "preset" {
                cfg.set(k, v.clone())?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Sets one dotted key; unknown keys and ill-typed values are errors.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let mut root = serde_json::to_value(&*self).expect("RunConfig serializes");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("bad value for `{key}`: {e}")))?;
        Ok(())
    }

    /// Applies `DSANET_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::BetaOutOfRange(self.beta));
        }
        if !(self.inference.threshold > 0.0 && self.inference.threshold < 1.0) {
            return Err(Error::Config("inference.threshold must lie in (0, 1)".into()));
        }
        self.model.sgnm.validate()?;
        self.model.text.validate()
    }

    /// Flat dotted-key JSON with sorted keys.
    pub fn to_json(&self) -> String {
        fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
            match v {
                Value::Object(m) => {
                    for (k, v) in m {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, v, out);
                    }
                }
                other => {
                    out.insert(prefix.to_owned(), other.clone());
                }
            }
        }
        let mut flat = BTreeMap::new();
        walk("", &serde_json::to_value(self).expect("RunConfig serializes"), &mut flat);
        serde_json::to_string_pretty(&flat).expect("map serializes") + "\n"
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

/// Per-term values of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub step: usize,
    #[serde(rename = "L_det")]
    pub det: f64,
    #[serde(rename = "L_align")]
    pub align: f64,
    #[serde(rename = "L_consist")]
    pub consist: f64,
    #[serde(rename = "L_compact")]
    pub compact: f64,
    #[serde(rename = "L_dcsa")]
    pub dcsa: f64,
    #[serde(rename = "L_sep")]
    pub sep: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub det: f64,
    pub align: f64,
    pub consist: f64,
    pub compact: f64,
    pub dcsa: f64,
    pub sep: f64,
}

/// `L_det + λ L_align + L_consist + L_compact + L_dcsa + L_sep`.
pub fn total_loss(t: &LossTerms, lambda: f64) -> Result<f64> {
    let total = t.det + lambda * t.align + t.consist + t.compact + t.dcsa + t.sep;
    if !total.is_finite() {
        return Err(Error::NonFiniteResult("total_loss"));
    }
    Ok(total)
}

/// Graph nodes of every objective over one batch. Per-video terms are
/// averaged over the videos that produce them.
#[derive(Clone, Copy, Debug)]
pub struct BatchObjective {
    pub det: Var,
    pub align: Var,
    pub consist: Var,
    pub compact: Var,
    pub event: Var,
    pub bkg: Var,
    pub dcsa: Var,
    pub sep: Var,
    pub total: Var,
}

impl BatchObjective {
    pub fn term(&self, name: &str) -> Option<Var> {
        Some(match name {
            "L_det" => self.det,
            "L_align" => self.align,
            "L_consist" => self.consist,
            "L_compact" => self.compact,
            "L_event" => self.event,
            "L_bkg" => self.bkg,
            "L_dcsa" => self.dcsa,
            "L_sep" => self.sep,
            "L_total" => self.total,
            _ => return None,
        })
    }

    pub fn terms<T: Scalar>(&self, g: &Graph<T>) -> LossTerms {
        let v = |x: Var| g.item(x).f64();
        LossTerms {
            det: v(self.det),
            align: v(self.align),
            consist: v(self.consist),
            compact: v(self.compact),
            dcsa: v(self.dcsa),
            sep: v(self.sep),
        }
    }
}

pub const OBJECTIVES: [&str; 9] = [
    "L_det",
    "L_align",
    "L_consist",
    "L_compact",
    "L_event",
    "L_bkg",
    "L_dcsa",
    "L_sep",
    "L_total",
];

fn tag<V>(r: Result<V>, term: &'static str) -> Result<V> {
    r.map_err(|e| match e {
        Error::NonFiniteResult(_) => Error::NonFiniteLoss { term, epoch: 0, step: 0 },
        other => other,
    })
}

fn mean_of<T: Scalar>(g: &mut Graph<T>, xs: &[Var]) -> Result<Var> {
    match xs.len() {
        0 => Ok(g.constant(Matrix::scalar(T::zero()))),
        1 => Ok(xs[0]),
        _ => {
            let c = g.concat_rows(xs)?;
            g.mean(c)
        }
    }
}

/// Builds every loss of one batch in `g`.
pub fn batch_objective<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    model: &DsaNet,
    batch: &[&(VideoRecord, Matrix<T>)],
    lambda: f64,
) -> Result<BatchObjective> {
    let t_text = tag(model.class_embeddings(g, store), "L_sep")?;
    let sep = tag(model.separation(g, t_text), "L_sep")?;
    let (mut det, mut align, mut consist, mut compact, mut event, mut bkg) =
        (vec![], vec![], vec![], vec![], vec![], vec![]);
    for (rec, frames) in batch {
        let x = g.constant(frames.clone());
        let (f_video, s_det) = tag(model.coarse(g, store, x), "L_det")?;
        let n = g.shape(f_video).0;
        let (_, l_det) = tag(model.detection.video_loss(g, s_det, rec.y), "L_det")?;
        det.push(l_det);

        let l_align = tag(
            (|| {
                let t_enh = model.fusion.enhance(g, store, t_text, f_video, s_det)?;
                let map = classify::alignment_map(g, f_video, t_enh, model.detection.k(n))?;
                classify::align_loss(g, map.s_c, rec.category)
            })(),
            "L_align",
        )?;
        align.push(l_align);

        if let Some(branch) = &model.sgnm {
            let out = tag(branch.forward(g, store, f_video, s_det), "L_compact")?;
            consist.push(out.consist);
            compact.push(out.compact);
        }
        if model.config.ablation.dcsa {
            let d = tag(
                (|| {
                    let pair = classify::decouple_prototypes(g, f_video, s_det)?;
                    classify::dcsa_loss(g, &pair, t_text, rec.category)
                })(),
                "L_dcsa",
            )?;
            event.push(d.event);
            bkg.extend(d.bkg);
        }
    }
    let det = mean_of(g, &det)?;
    let align = mean_of(g, &align)?;
    let consist = mean_of(g, &consist)?;
    let compact = mean_of(g, &compact)?;
    let event = mean_of(g, &event)?;
    let bkg = mean_of(g, &bkg)?;
    let total = tag(
        (|| {
            let dcsa = g.add(event, bkg)?;
            let weighted = g.scale(align, T::of(lambda))?;
            let mut total = g.add(det, weighted)?;
            for t in [consist, compact, dcsa, sep] {
                total = g.add(total, t)?;
            }
            Ok((dcsa, total))
        })(),
        "L_total",
    )?;
    Ok(BatchObjective {
        det,
        align,
        consist,
        compact,
        event,
        bkg,
        dcsa: total.0,
        sep,
        total: total.1,
    })
}

/// Reads the precomputed text embeddings named in the config, if any.
pub fn fixed_text(cfg: &RunConfig) -> Result<Option<Matrix<f64>>> {
    cfg.model
        .text
        .embeddings_file
        .as_deref()
        .map(|p| read_features::<f64>(Path::new(p)))
        .transpose()
}

/// Fresh model and parameters from `cfg.seed`.
pub fn build_model<T: Scalar>(cfg: &RunConfig, dim: usize, classes: &[String]) -> Result<(DsaNet, ParameterStore<T>)> {
    let mut store = ParameterStore::new();
    let model = DsaNet::new(&mut store, dim, classes, &cfg.model, fixed_text(cfg)?, &mut seeded(cfg.seed))?;
    Ok((model, store))
}

/// Model of `cfg` with parameters read from a checkpoint, which must cover
/// every parameter.
pub fn restore<T: Scalar>(cfg: &RunConfig, dim: usize, classes: &[String], path: &Path) -> Result<(DsaNet, ParameterStore<T>)> {
    let (model, mut store) = build_model::<T>(cfg, dim, classes)?;
    let values = checkpoint::load::<T>(path)?;
    if let Some((_, p)) = store.iter().find(|(_, p)| !values.iter().any(|(n, _)| *n == p.name)) {
        return Err(Error::schema(p.name.clone(), "parameter missing from checkpoint"));
    }
    store.load_values(&values)?;
    Ok((model, store))
}

/// Features of every video in the manifest, in manifest order.
pub fn load_videos<T: Scalar>(manifest: &DatasetManifest) -> Result<Vec<(VideoRecord, Matrix<T>)>> {
    manifest
        .videos
        .iter()
        .map(|r| Ok((r.clone(), crate::datamodel::load_features::<T>(r)?.frames)))
        .collect()
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch{epoch:02}.dsck")
}

#[derive(Debug)]
pub struct TrainOutcome<T> {
    pub model: DsaNet,
    pub store: ParameterStore<T>,
    pub reports: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
}

struct Artifacts {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl Artifacts {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, cfg.to_json()).map_err(|e| Error::io(&cfg_path, e))?;
        let log_path = dir.join(LOSS_LOG_FILE);
        let log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        Ok(Self {
            dir: dir.to_owned(),
            log: BufWriter::new(log),
        })
    }

    fn report(&mut self, r: &LossReport) -> Result<()> {
        let line = serde_json::to_string(r).expect("LossReport serializes");
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.dir.join(LOSS_LOG_FILE), e))
    }

    fn epoch_done<T: Scalar>(&mut self, epoch: usize, store: &ParameterStore<T>) -> Result<PathBuf> {
        self.log.flush().map_err(|e| Error::io(self.dir.join(LOSS_LOG_FILE), e))?;
        let path = self.dir.join(checkpoint_name(epoch));
        checkpoint::save(&path, store)?;
        Ok(path)
    }
}

/// Trains from `cfg.seed`. With `out`, writes `config.json`, `losses.jsonl`
/// and one checkpoint per epoch there.
pub fn train<T: Scalar>(
    videos: &[(VideoRecord, Matrix<T>)],
    classes: &[String],
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let dim = videos
        .first()
        .map(|(_, m)| m.cols())
        .ok_or_else(|| Error::Config("no training videos".into()))?;
    let (model, mut store) = build_model::<T>(cfg, dim, classes)?;
    let mut artifacts = out.map(|d| Artifacts::create(d, cfg)).transpose()?;
    let opt = cfg.optimizer();
    let mut order_rng = seeded(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&(VideoRecord, Matrix<T>)> = chunk.iter().map(|&i| &videos[i]).collect();
            let mut g = Graph::new();
            let obj = batch_objective(&mut g, &store, &model, &batch, cfg.lambda).map_err(|e| match e {
                Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss { term, epoch, step },
                other => other,
            })?;
            let terms = obj.terms(&g);
            for (name, v) in [
                ("L_det", terms.det),
                ("L_align", terms.align),
                ("L_consist", terms.consist),
                ("L_compact", terms.compact),
                ("L_dcsa", terms.dcsa),
                ("L_sep", terms.sep),
            ] {
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { term: name, epoch, step });
                }
            }
            let total = total_loss(&terms, cfg.lambda).map_err(|_| Error::NonFiniteLoss {
                term: "L_total",
                epoch,
                step,
            })?;
            g.backward(obj.total)?;
            store.absorb(&g);
            store.adamw_step(&opt);
            store.zero_grad();
            let report = LossReport {
                epoch,
                step,
                det: terms.det,
                align: terms.align,
                consist: terms.consist,
                compact: terms.compact,
                dcsa: terms.dcsa,
                sep: terms.sep,
                total,
            };
            log::debug!("epoch {epoch} step {step}: L_total={total:.6}");
            if let Some(a) = artifacts.as_mut() {
                a.report(&report)?;
            }
            reports.push(report);
            step += 1;
        }
        if let Some(a) = artifacts.as_mut() {
            checkpoints.push(a.epoch_done(epoch, &store)?);
        }
    }
    Ok(TrainOutcome {
        model,
        store,
        reports,
        checkpoints,
    })
}

/// Mean `L_total` of the steps of one epoch.
pub fn epoch_mean_total(reports: &[LossReport], epoch: usize) -> Option<f64> {
    let xs: Vec<f64> = reports.iter().filter(|r| r.epoch == epoch).map(|r| r.total).collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

#[derive(Clone, Debug)]
pub struct ObjectiveCheck {
    pub objective: &'static str,
    pub report: FdReport,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checks: Vec<ObjectiveCheck>,
    /// Trainable parameters whose `L_total` gradient was zero at every
    /// checked entry.
    pub dead: Vec<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.dead.is_empty() && self.checks.iter().all(|c| c.report.passed())
    }

    /// `{objective: {module: max_rel_err}}` plus the overall verdict.
    pub fn to_json(&self) -> String {
        let mut objectives = serde_json::Map::new();
        for c in &self.checks {
            let mut m = serde_json::Map::new();
            for (module, err) in c.report.by_module() {
                m.insert(module, Value::from(err));
            }
            m.insert("max".into(), Value::from(c.report.max_rel_err()));
            m.insert("passed".into(), Value::from(c.report.passed()));
            objectives.insert(c.objective.into(), Value::Object(m));
        }
        let v = serde_json::json!({
            "objectives": objectives,
            "dead_parameters": self.dead,
            "passed": self.passed(),
        });
        serde_json::to_string_pretty(&v).expect("report serializes") + "\n"
    }
}

/// Shrinks a config to the gradcheck instance: `D = 8`, `K ≤ 4`, at most
/// two decoder and text layers.
pub fn gradcheck_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    let m = &mut c.model;
    m.sgnm.k = m.sgnm.k.min(4);
    m.sgnm.decoder_layers = m.sgnm.decoder_layers.min(2);
    m.text.layers = m.text.layers.min(2);
    m.text.adapter_layers = m.text.adapter_layers.min(m.text.layers);
    m.text.embeddings_file = None;
    if 8 % m.temporal.n_heads != 0 {
        m.temporal.n_heads = 2;
    }
    m.temporal.window = m.temporal.window.min(4);
    c
}

/// Tiny fixed two-video batch (one normal, one abnormal; `N = 6`, `D = 8`,
/// `C = 3`) from `seed`.
pub fn gradcheck_batch(seed: u64) -> Result<(Vec<String>, Vec<(VideoRecord, Matrix<f64>)>)> {
    let spec = SynthSpec {
        n_videos: 2,
        frames_per_video: 6,
        dim: 8,
        n_classes: 3,
        anomaly_ratio: 0.5,
        cluster_separation: 1.5,
        noise_scale: 0.5,
        seed,
        test_videos: 0,
    };
    let ds = generate(&spec)?;
    let videos = ds
        .train
        .videos
        .iter()
        .zip(&ds.features)
        .map(|(r, (_, m))| (r.clone(), m.cast()))
        .collect();
    Ok((ds.train.classes.clone(), videos))
}

/// Finite-difference check of every objective against the model's
/// parameters, at a random perturbation of the initialization so that
/// zero-initialized layers are exercised.
pub fn gradcheck(cfg: &RunConfig, opts: &FdOptions) -> Result<GradcheckReport> {
    let cfg = gradcheck_config(cfg);
    let (classes, videos) = gradcheck_batch(cfg.seed)?;
    let (model, mut store) = build_model::<f64>(&cfg, 8, &classes)?;
    let mut rng = seeded(cfg.seed.wrapping_add(2));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if p.trainable {
            p.value = p.value.map(|v| v + 0.3 * gaussian(&mut rng));
        }
    }
    let batch: Vec<_> = videos.iter().collect();
    let mut checks = Vec::new();
    for objective in OBJECTIVES {
        let report = finite_diff_check(
            &mut store,
            |s, g| {
                let obj = batch_objective(g, s, &model, &batch, cfg.lambda)?;
                Ok(obj.term(objective).expect("known objective"))
            },
            opts,
        )?;
        checks.push(ObjectiveCheck { objective, report });
    }
    let total = &checks.last().expect("L_total checked").report;
    let dead = total
        .params
        .iter()
        .filter(|p| p.checked > 0 && p.max_abs_grad == 0.0)
        .map(|p| p.name.clone())
        .collect();
    Ok(GradcheckReport { checks, dead })
}
