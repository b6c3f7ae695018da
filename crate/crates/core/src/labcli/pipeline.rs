use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use super::config::{ExperimentConfig, ORIGIN};
use crate::charprobe::{capture_features, extract_layer_weights, train_probe, WeightsFile};
use crate::codeclm::{CodecLm, Optimizer, ParamScope, TokenSequence};
use crate::error::{invalid, Error, Result};
use crate::evalkit::{
    bench_steps, evaluate_adaptation, prompted_ter, train_reference_evaluator, transcript_error_rate, EvalInputs, EvalRow, ReferenceEvaluator,
};
use crate::ftstrat::{run_finetune, FineTunePlan, FinetuneSchedule, SelectionPolicy};
use crate::gradcore::{AdamConfig, LrSchedule, Real};
use crate::synthworld::{build_corpora, make_domain, prompted_batches, Corpora, DomainSpec, Split};

/// A configured experiment rooted at its output directory.
#[derive(Clone, Debug)]
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stamp {
    config_hash: String,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid!("cannot read {}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// File-system friendly strategy name.
pub fn slug(strategy: &str) -> String {
    strategy.replace(':', "-").replace(',', "_")
}

/// The two adaptation domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Target,
    Transfer,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Target => "target",
            Domain::Transfer => "transfer",
        }
    }

    pub fn train(self) -> Split {
        match self {
            Domain::Target => Split::TargetTrain,
            Domain::Transfer => Split::TransferTrain,
        }
    }

    pub fn test(self) -> Split {
        match self {
            Domain::Target => Split::TargetTest,
            Domain::Transfer => Split::TransferTest,
        }
    }
}

pub struct LabData {
    pub spec: DomainSpec,
    pub corpora: Corpora,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PretrainState {
    config_hash: String,
    step: u64,
    log: Vec<LossPoint>,
    pending_sum: f64,
    pending_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSummary {
    pub config_hash: String,
    pub steps: u64,
    pub checkpoint_hash: String,
    pub params_hash: String,
    pub log: Vec<LossPoint>,
    /// Prompted greedy transcript error on held-out source data.
    pub source_ter: f64,
    /// The same metric on the held-out ground-truth speech.
    pub ground_truth_ter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSummary {
    pub config_hash: String,
    pub backbone_hash: String,
    pub speaker_accuracy: f64,
    pub emotion_accuracy: f64,
    pub curve_hash: String,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub ss: f64,
    pub ers: f64,
    pub ter_target: f64,
    pub ter_source: f64,
    pub mean_loss: Option<f64>,
    pub params_hash: String,
}

/// Every evaluated epoch of one (strategy, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellResult {
    pub config_hash: String,
    pub domain: Domain,
    pub strategy: String,
    pub seed: u64,
    pub layers_1based: Vec<usize>,
    pub lora_rank: Option<usize>,
    pub trainable: usize,
    pub total: usize,
    /// Base transformer-stack parameters of the backbone.
    pub transformer_total: usize,
    /// Trainable parameters that sit inside the transformer layers,
    /// adapters included.
    pub transformer_trainable: usize,
    pub evaluator_hash: String,
    pub epochs: Vec<EpochRow>,
}

impl CellResult {
    pub fn last(&self) -> &EpochRow {
        self.epochs.last().expect("cells hold at least the origin epoch")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub strategy: String,
    pub trainable: usize,
    pub total: usize,
    pub steps: usize,
    pub seconds: f64,
    pub sec_per_100_steps: f64,
    pub steps_per_sec: f64,
}

impl Lab {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        let dir = cfg.out_dir.clone();
        Ok(Self { cfg, hash, dir })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Appends `stage` to the stage log under `log_dir`.
    pub fn stage(&self, log_dir: &Path, stage: &str) -> Result<()> {
        std::fs::create_dir_all(log_dir)?;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(log_dir.join("stages.log"))?;
        writeln!(f, "{stage}")?;
        log::info!("stage {stage}");
        Ok(())
    }

    fn check_hash(&self, found: &str, what: &str) -> Result<()> {
        if found != self.hash {
            return Err(Error::ConfigMismatch(format!("{what} was produced by config {found}, this run is {}", self.hash)));
        }
        Ok(())
    }

    fn check_stamp(&self, dir: &Path, what: &str) -> Result<()> {
        let stamp: Stamp = read_json(&dir.join("stamp.json"))?;
        self.check_hash(&stamp.config_hash, what)
    }

    fn stamp(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("stamp.json"), &Stamp { config_hash: self.hash.clone() })
    }

    pub fn gen_data(&self) -> Result<LabData> {
        self.stage(&self.dir, "gen-data")?;
        let d = &self.cfg.domain;
        let spec = make_domain(d.seed, d.sizes)?;
        let corpora = build_corpora(&spec, &d.layout)?;
        let dir = self.path("data");
        corpora.write(&dir)?;
        std::fs::write(dir.join("domain.json"), spec.to_json()? + "\n")?;
        self.stamp(&dir)?;
        Ok(LabData { spec, corpora })
    }

    pub fn load_data(&self) -> Result<LabData> {
        let dir = self.path("data");
        self.check_stamp(&dir, "corpus")?;
        let spec = DomainSpec::from_json(&std::fs::read_to_string(dir.join("domain.json"))?)?;
        let corpora = Corpora::read(&dir)?;
        Ok(LabData { spec, corpora })
    }

    fn evaluator_path(&self, domain: Domain) -> PathBuf {
        self.path(&format!("evaluator/{}.json", domain.name()))
    }

    /// Loads the domain's frozen evaluator, training it on first use.
    pub fn evaluator(&self, data: &LabData, domain: Domain) -> Result<ReferenceEvaluator> {
        let path = self.evaluator_path(domain);
        let dir = path.parent().expect("has parent").to_path_buf();
        if path.exists() {
            self.check_stamp(&dir, "evaluator")?;
            return ReferenceEvaluator::load(&path);
        }
        self.stage(&self.dir, &format!("evaluator:{}", domain.name()))?;
        let m = data.corpora.manifest(domain.test());
        let seed = self.cfg.seed.wrapping_mul(31).wrapping_add(domain as u64 + 1);
        let ev = train_reference_evaluator(&data.spec, &m.speakers, &m.emotions, &self.cfg.evaluator, seed)?;
        std::fs::create_dir_all(&dir)?;
        ev.save(&path)?;
        self.stamp(&dir)?;
        Ok(ev)
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.path("pretrain/model.cspl")
    }

    fn meta(&self, model_cfg: &crate::codeclm::ModelConfig, step: u64, seed: u64, parent: Option<String>, lora: Option<(usize, f64)>) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            config_hash: self.hash.clone(),
            config: serde_json::to_value(&self.cfg)?,
            model: model_cfg.clone(),
            lora_rank: lora.map(|l| l.0),
            lora_scale: lora.map(|l| l.1),
            step,
            seed,
            parent_hash: parent,
        })
    }

    /// Trains (or resumes) the source model up to `until` steps, default
    /// the configured total. A partial run leaves a resumable checkpoint.
    pub fn pretrain<R: Real>(&self, data: &LabData, resume: bool, until: Option<u64>) -> Result<Option<PretrainSummary>> {
        let p = &self.cfg.pretrain;
        let total = p.steps;
        let until = until.unwrap_or(total).min(total);
        let state_path = self.path("pretrain/state.json");
        let (mut model, mut state) = if resume && self.checkpoint_path().exists() {
            let (model, meta, _) = load_checkpoint::<R>(&self.checkpoint_path())?;
            self.check_hash(&meta.config_hash, "checkpoint")?;
            let state: PretrainState = read_json(&state_path)?;
            self.check_hash(&state.config_hash, "pretraining state")?;
            if state.step != meta.step {
                return Err(Error::Checkpoint(format!("state at step {} but checkpoint at {}", state.step, meta.step)));
            }
            (model, state)
        } else {
            let model = CodecLm::<R>::new(self.cfg.model.clone(), self.cfg.seed)?;
            (model, PretrainState { config_hash: self.hash.clone(), step: 0, log: Vec::new(), pending_sum: 0.0, pending_count: 0 })
        };
        self.stage(&self.dir, &format!("pretrain:{}..{}", state.step, until))?;
        let corpus = data.corpora.get(Split::Pretrain);
        let per_epoch = corpus.len().div_ceil(p.batch_size) as u64;
        let schedule = LrSchedule::with_warmup(p.peak_lr, total, p.warmup_fraction)?;
        let mut opt = Optimizer::resumed(AdamConfig::default(), schedule, state.step);
        let mut epoch_batches: Option<(u64, Vec<Vec<TokenSequence>>)> = None;
        let t0 = Instant::now();
        while state.step < until {
            let epoch = state.step / per_epoch;
            if epoch_batches.as_ref().map(|b| b.0) != Some(epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                rng.set_stream(epoch + 1);
                epoch_batches = Some((epoch, prompted_batches(corpus, p.batch_size, p.prompt_prob, &mut rng)?));
            }
            let batch = &epoch_batches.as_ref().expect("just built").1[(state.step % per_epoch) as usize];
            let loss = opt.step(&mut model, batch).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("pretraining diverged at step {}: {m}", state.step + 1)),
                e => e,
            })?;
            state.step += 1;
            state.pending_sum += loss;
            state.pending_count += 1;
            if state.step % p.log_every == 0 || state.step == total {
                let mean_loss = state.pending_sum / state.pending_count as f64;
                log::info!("pretrain step {} loss {mean_loss:.4} ({:.1}s)", state.step, t0.elapsed().as_secs_f64());
                state.log.push(LossPoint { step: state.step, mean_loss });
                state.pending_sum = 0.0;
                state.pending_count = 0;
            }
        }
        let hash = save_checkpoint(&model, &self.meta(model.config(), state.step, self.cfg.seed, None, None)?, &self.checkpoint_path())?;
        write_json(&state_path, &state)?;
        if state.step < total {
            return Ok(None);
        }
        let held = data.corpora.get(Split::SourceHeldout);
        let pool = data.corpora.get(Split::Pretrain);
        let source_ter = prompted_ter(&model, &data.spec, held, pool)?;
        let mut ground_truth_ter = 0.0;
        for u in held {
            ground_truth_ter += transcript_error_rate(&data.spec, &u.speech, &u.text, u.speaker, u.emotion)?;
        }
        ground_truth_ter /= held.len() as f64;
        let summary = PretrainSummary {
            config_hash: self.hash.clone(),
            steps: state.step,
            checkpoint_hash: hash,
            params_hash: model.params().hash(),
            log: state.log,
            source_ter,
            ground_truth_ter,
        };
        write_json(&self.path("pretrain/summary.json"), &summary)?;
        if source_ter > 0.15 {
            log::warn!("pretrained source TER {source_ter:.3} is above the 0.15 sanity bar (ground truth {ground_truth_ter:.3})");
        }
        Ok(Some(summary))
    }

    pub fn pretrain_summary(&self) -> Result<PretrainSummary> {
        let s: PretrainSummary = read_json(&self.path("pretrain/summary.json"))?;
        self.check_hash(&s.config_hash, "pretraining summary")?;
        Ok(s)
    }

    /// The finished pretrained model.
    pub fn pretrained<R: Real>(&self) -> Result<CodecLm<R>> {
        let (model, meta, _) = load_checkpoint::<R>(&self.checkpoint_path())?;
        self.check_hash(&meta.config_hash, "checkpoint")?;
        if meta.step != self.cfg.pretrain.steps {
            return Err(invalid!("pretraining stopped at step {} of {}", meta.step, self.cfg.pretrain.steps));
        }
        Ok(model)
    }

    pub fn weights_path(&self) -> PathBuf {
        self.path("probe/weights.json")
    }

    pub fn probe<R: Real>(&self, data: &LabData) -> Result<WeightsFile> {
        self.stage(&self.dir, "probe")?;
        let model = self.pretrained::<R>()?;
        let samples = capture_features(&model, data.corpora.get(Split::TargetTrain))?;
        let result = train_probe(&samples, &self.cfg.probe, self.cfg.seed)?;
        let (w_emotion, w_speaker) = extract_layer_weights(&result, model.config().n_layers)?;
        let weights = WeightsFile { backbone_config_hash: model.identity_hash(), w_emotion, w_speaker, probe_seed: self.cfg.seed };
        std::fs::create_dir_all(self.path("probe"))?;
        weights.save(&self.weights_path())?;
        write_json(
            &self.path("probe/summary.json"),
            &ProbeSummary {
                config_hash: self.hash.clone(),
                backbone_hash: model.identity_hash(),
                speaker_accuracy: result.speaker_accuracy,
                emotion_accuracy: result.emotion_accuracy,
                curve_hash: result.curve_hash(),
                final_loss: result.trace.last().map(|s| s.loss),
            },
        )?;
        Ok(weights)
    }

    fn plan_dir(&self, domain: Domain) -> PathBuf {
        match domain {
            Domain::Target => self.path("plans"),
            Domain::Transfer => self.path("transfer/plans"),
        }
    }

    pub fn plan_path(&self, domain: Domain, strategy: &str) -> PathBuf {
        self.plan_dir(domain).join(format!("{}.json", slug(strategy)))
    }

    /// Resolves and writes a plan file for every non-origin strategy.
    pub fn select<R: Real>(&self, domain: Domain, strategies: &[String]) -> Result<Vec<FineTunePlan>> {
        self.stage(&self.stage_dir(domain), "select")?;
        let model = self.pretrained::<R>()?;
        let weights_path = self.weights_path();
        let weights = if weights_path.exists() { Some(WeightsFile::load(&weights_path)?) } else { None };
        std::fs::create_dir_all(self.plan_dir(domain))?;
        let mut plans = Vec::new();
        for s in strategies.iter().filter(|s| s.as_str() != ORIGIN) {
            let policy: SelectionPolicy = s.parse()?;
            let w = match (&weights, policy.needs_weights()) {
                (Some(w), true) => Some((w, "probe/weights.json")),
                (None, true) => return Err(invalid!("strategy `{s}` needs the probe weights file; run `probe` first")),
                _ => None,
            };
            let plan = FineTunePlan::resolve(&policy, &model, w, &self.hash)?;
            plan.save(&self.plan_path(domain, s))?;
            plans.push(plan);
        }
        Ok(plans)
    }

    pub fn load_plan(&self, domain: Domain, strategy: &str) -> Result<FineTunePlan> {
        let plan = FineTunePlan::load(&self.plan_path(domain, strategy))?;
        self.check_hash(&plan.config_hash, "plan file")?;
        Ok(plan)
    }

    fn stage_dir(&self, domain: Domain) -> PathBuf {
        match domain {
            Domain::Target => self.dir.clone(),
            Domain::Transfer => self.path("transfer"),
        }
    }

    pub fn cell_path(&self, domain: Domain, strategy: &str, seed: u64) -> PathBuf {
        self.path(&format!("runs/{}/{}/seed{seed}.json", domain.name(), slug(strategy)))
    }

    pub fn schedule(&self) -> FinetuneSchedule {
        let f = &self.cfg.finetune;
        FinetuneSchedule {
            epochs: f.epochs,
            peak_lr: f.lr_fraction * self.cfg.pretrain.peak_lr,
            warmup_fraction: f.warmup_fraction,
            batch_size: f.batch_size,
            prompt_prob: f.prompt_prob,
        }
    }

    /// Fine-tunes one (strategy, seed) cell and evaluates every epoch.
    /// Finished cells with a matching config hash are reused.
    pub fn run_cell<R: Real>(&self, data: &LabData, domain: Domain, strategy: &str, seed: u64) -> Result<CellResult> {
        let path = self.cell_path(domain, strategy, seed);
        if path.exists() {
            let cell: CellResult = read_json(&path)?;
            if cell.config_hash == self.hash {
                return Ok(cell);
            }
        }
        self.stage(&self.stage_dir(domain), &format!("finetune:{strategy}:{seed}"))?;
        let model = self.pretrained::<R>()?;
        let ev = self.evaluator(data, domain)?;
        let inputs = EvalInputs {
            spec: &data.spec,
            evaluator: &ev,
            target_test: data.corpora.get(domain.test()),
            target_prompts: data.corpora.get(domain.train()),
            source_test: data.corpora.get(Split::SourceHeldout),
            source_prompts: data.corpora.get(Split::Pretrain),
        };
        let transformer_total = model.count_params(&ParamScope::Transformer)?;
        let row = |epoch: usize, r: EvalRow, mean_loss, params_hash| EpochRow {
            epoch,
            ss: r.ss,
            ers: r.ers,
            ter_target: r.ter_target,
            ter_source: r.ter_source,
            mean_loss,
            params_hash,
        };
        let mut cell = CellResult {
            config_hash: self.hash.clone(),
            domain,
            strategy: strategy.to_string(),
            seed,
            layers_1based: Vec::new(),
            lora_rank: None,
            trainable: 0,
            total: model.params().total_count(),
            transformer_total,
            transformer_trainable: 0,
            evaluator_hash: ev.hash(),
            epochs: Vec::new(),
        };
        if strategy == ORIGIN {
            let r = evaluate_adaptation(&model, &inputs)?;
            cell.epochs.push(row(0, r, None, model.params().hash()));
        } else {
            let plan = self.load_plan(domain, strategy)?;
            cell.layers_1based = plan.layers_1based.clone();
            cell.lora_rank = plan.lora_rank;
            cell.trainable = plan.trainable;
            cell.total = plan.total;
            cell.transformer_trainable =
                plan.apply(&model, seed)?.params().count(|g| g.trainable && g.name.starts_with("transformer.layer."));
            let corpus = data.corpora.get(domain.train());
            let mut rows = Vec::new();
            let out = run_finetune(&model, &plan, corpus, &self.schedule(), seed, |rep, m| {
                let r = evaluate_adaptation(m, &inputs)?;
                log::info!("{strategy} seed {seed} epoch {}: ss {:.4} ers {:.4} ter {:.3}/{:.3}", rep.epoch, r.ss, r.ers, r.ter_target, r.ter_source);
                rows.push(row(rep.epoch, r, rep.mean_loss, rep.params_hash.clone()));
                Ok(())
            })?;
            cell.epochs = rows;
            let lora = out.model.lora().map(|l| (l.rank, l.scale));
            let meta = self.meta(out.model.config(), out.epochs.last().map_or(0, |e| e.steps), seed, Some(model.identity_hash()), lora)?;
            save_checkpoint(&out.model, &meta, &path.with_extension("cspl"))?;
        }
        write_json(&path, &cell)?;
        Ok(cell)
    }

    pub fn load_cell(&self, domain: Domain, strategy: &str, seed: u64) -> Result<Option<CellResult>> {
        let path = self.cell_path(domain, strategy, seed);
        if !path.exists() {
            return Ok(None);
        }
        let cell: CellResult = read_json(&path)?;
        self.check_hash(&cell.config_hash, "run result")?;
        Ok(Some(cell))
    }

    /// Times `bench.steps` optimizer steps for each benchmarked strategy.
    pub fn bench<R: Real>(&self, data: &LabData) -> Result<Vec<TimingRow>> {
        self.stage(&self.dir, "bench")?;
        let model = self.pretrained::<R>()?;
        let corpus = data.corpora.get(Split::TargetTrain);
        let f = &self.cfg.finetune;
        let mut rows = Vec::new();
        for s in &self.cfg.bench.strategies {
            let plan = self.load_plan(Domain::Target, s)?;
            let b = bench_steps(&model, &plan, corpus, f.batch_size, f.prompt_prob, self.cfg.bench.steps)?;
            log::info!("bench {s}: {:.2}s per 100 steps", b.sec_per_100_steps);
            rows.push(TimingRow {
                strategy: s.clone(),
                trainable: plan.trainable,
                total: plan.total,
                steps: b.steps,
                seconds: b.seconds,
                sec_per_100_steps: b.sec_per_100_steps,
                steps_per_sec: b.steps_per_sec,
            });
        }
        write_json(&self.path("bench/timing.json"), &rows)?;
        Ok(rows)
    }

    pub fn load_timing(&self) -> Result<Option<Vec<TimingRow>>> {
        let p = self.path("bench/timing.json");
        if p.exists() {
            Ok(Some(read_json(&p)?))
        } else {
            Ok(None)
        }
    }

    /// Every main-grid stage, then the transfer run and both reports.
    /// Returns whether the reports are complete.
    pub fn run_all<R: Real>(&self) -> Result<bool> {
        let data = self.gen_data()?;
        if self.pretrain::<R>(&data, true, None)?.is_none() {
            return Err(invalid!("pretraining did not finish"));
        }
        self.evaluator(&data, Domain::Target)?;
        self.probe::<R>(&data)?;
        let mut strategies = self.cfg.strategies.clone();
        for s in &self.cfg.bench.strategies {
            if !strategies.contains(s) {
                strategies.push(s.clone());
            }
        }
        self.select::<R>(Domain::Target, &strategies)?;
        for s in &self.cfg.strategies {
            for &seed in &self.cfg.seeds {
                self.run_cell::<R>(&data, Domain::Target, s, seed)?;
            }
        }
        self.bench::<R>(&data)?;
        let main = super::report::write_report(self, Domain::Target)?;
        let transfer = self.transfer_experiment::<R>(&data)?;
        Ok(main && transfer)
    }

    /// Fine-tunes on the second target domain with the layer choice learned
    /// on the first; no probing happens here.
    pub fn transfer_experiment<R: Real>(&self, data: &LabData) -> Result<bool> {
        let log_dir = self.stage_dir(Domain::Transfer);
        self.stage(&log_dir, "transfer")?;
        if data.corpora.get(Split::TransferTrain).is_empty() || data.corpora.get(Split::TransferTest).is_empty() {
            return Err(invalid!("the second target domain is missing"));
        }
        if !self.weights_path().exists() {
            return Err(invalid!("transfer needs the first domain's probe weights"));
        }
        self.evaluator(data, Domain::Transfer)?;
        self.select::<R>(Domain::Transfer, &self.cfg.transfer_strategies)?;
        for s in &self.cfg.transfer_strategies {
            for &seed in &self.cfg.seeds {
                self.run_cell::<R>(data, Domain::Transfer, s, seed)?;
            }
        }
        super::report::write_report(self, Domain::Transfer)
    }
}
