use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use sasv::decision::{fit_calibration_report, CalibrationParams, FusionConfig, FusionMode};
use sasv::io::{self, EvalReport, ScoreRow};
use sasv::metrics::{det_points, split_by_class};
use sasv::nn::{Activation, DEFAULT_LEAKY_SLOPE};
use sasv::sim::{self, EmbeddingSimConfig, GridSpec, ScoreSimConfig};
use sasv::train::{
    self, Architecture, CalibrationGradient, InitKind, LossVariant, OptimizerKind, TrainConfig, TrainData,
};
use sasv::{CostModel, TrialLabel, TrialRecord};

use crate::{
    Arch, CalibGradArg, CalibrateArgs, Command, CostArgs, DetArgs, EvalArgs, FuseArgs, GridArgs, InitArg, LossArg,
    Negatives, OptimizerArg, SimMode, SimulateArgs, Task, TrainArgs,
};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Fuse(a) => fuse(a),
        Command::Eval(a) => eval(a),
        Command::Train(a) => train(a),
        Command::Det(a) => det(a),
        Command::Grid(a) => grid(a),
    }
}

impl CostArgs {
    fn model(&self) -> Result<CostModel> {
        Ok(CostModel::new(
            self.cmiss,
            self.cfa_non,
            self.cfa_spf,
            self.ptar,
            self.pnon,
            self.pspf,
        )?)
    }
}

fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    io::read_scores(path).with_context(|| format!("reading {}", path.display()))
}

fn labelled(rows: &[ScoreRow]) -> Vec<(f64, TrialLabel)> {
    rows.iter().map(|r| (r.score, r.trial.label())).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    match a.mode {
        SimMode::Scores => {
            let mut cfg: ScoreSimConfig = match &a.config {
                Some(p) => io::read_json(p).with_context(|| format!("reading {}", p.display()))?,
                None => ScoreSimConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let scores = sim::simulate_scores(&cfg)?;
            let mut asv = Vec::with_capacity(scores.len());
            let mut cm = Vec::with_capacity(scores.len());
            for (i, s) in scores.iter().enumerate() {
                let trial = TrialRecord::new(format!("sim-enr-{i:06}"), format!("sim-tst-{i:06}"), s.label)?;
                asv.push(ScoreRow {
                    trial: trial.clone(),
                    score: s.llr_asv,
                });
                cm.push(ScoreRow { trial, score: s.llr_cm });
            }
            create_dir(&a.out_dir)?;
            io::write_scores(&a.out_dir.join("asv.tsv"), &asv)?;
            io::write_scores(&a.out_dir.join("cm.tsv"), &cm)?;
            io::write_json(&a.out_dir.join("config.json"), &cfg)?;
        }
        SimMode::Embeddings => {
            let mut cfg: EmbeddingSimConfig = match &a.config {
                Some(p) => io::read_json(p).with_context(|| format!("reading {}", p.display()))?,
                None => EmbeddingSimConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let out = sim::simulate_embeddings(&cfg)?;
            create_dir(&a.out_dir)?;
            io::write_embeddings(&a.out_dir.join("asv.bin"), &out.asv)?;
            io::write_embeddings(&a.out_dir.join("cm.bin"), &out.cm)?;
            io::write_protocol(&a.out_dir.join("train.tsv"), &out.train)?;
            io::write_protocol(&a.out_dir.join("dev.tsv"), &out.dev)?;
            io::write_json(&a.out_dir.join("config.json"), &cfg)?;
        }
    }
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let rows = read_scores(&a.scores)?;
    let (scores, labels): (Vec<f64>, Vec<bool>) = rows
        .iter()
        .filter_map(|r| {
            let bits = r.trial.label().label_maps();
            match a.task {
                Task::Asv => bits.asv.map(|y| (r.score, y)),
                Task::Cm => Some((r.score, bits.cm)),
            }
        })
        .unzip();
    let fit = fit_calibration_report(&scores, &labels)?;
    if fit.separable {
        log::warn!(
            "classes are separable; calibration scale capped at |w1| = {}",
            fit.params.w1.abs()
        );
    }
    io::write_json(&a.out, &fit.params)?;
    Ok(())
}

fn read_calibration(path: Option<&Path>) -> Result<CalibrationParams> {
    match path {
        Some(p) => io::read_json(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(CalibrationParams::IDENTITY),
    }
}

fn fuse(a: FuseArgs) -> Result<()> {
    let cost = a.cost.model()?;
    let rho = match a.rho {
        Some(r) => r,
        None => cost.rho()?,
    };
    let fusion = FusionConfig::new(a.mode.into(), rho)?;
    let asv_calib = read_calibration(a.asv_calib.as_deref())?;
    let cm_calib = read_calibration(a.cm_calib.as_deref())?;
    let asv = read_scores(&a.asv)?;
    let cm = read_scores(&a.cm)?;
    if asv.len() != cm.len() {
        bail!("ASV file has {} trials but CM file has {}", asv.len(), cm.len());
    }
    let mut by_pair: HashMap<(&str, &str), &ScoreRow> = HashMap::with_capacity(cm.len());
    for r in &cm {
        if by_pair.insert((r.trial.enroll_id(), r.trial.test_id()), r).is_some() {
            bail!("CM file repeats trial {} {}", r.trial.enroll_id(), r.trial.test_id());
        }
    }
    let mut fused = Vec::with_capacity(asv.len());
    for r in &asv {
        let key = (r.trial.enroll_id(), r.trial.test_id());
        let c = by_pair
            .remove(&key)
            .ok_or_else(|| anyhow!("trial {} {} has no CM score", key.0, key.1))?;
        if c.trial.label() != r.trial.label() {
            bail!("trial {} {} is labelled differently in the two files", key.0, key.1);
        }
        fused.push(ScoreRow {
            trial: r.trial.clone(),
            score: fusion.fuse(asv_calib.apply(r.score), cm_calib.apply(c.score)),
        });
    }
    io::write_scores(&a.out, &fused)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cost = a.cost.model()?;
    let rows = read_scores(&a.scores)?;
    let report = EvalReport::compute(&labelled(&rows), &cost, !a.unnormalized, a.threshold)?;
    match &a.report {
        Some(p) => io::write_json(p, &report)?,
        None => print!("{}", io::to_json(&report)?),
    }
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        architecture: match a.arch {
            Arch::MlpMlp => Architecture::MlpMlp,
            Arch::CosineMlp => Architecture::CosineMlp,
            Arch::WcosMlp => Architecture::WeightedCosineMlp,
        },
        fusion: a.fusion.into(),
        loss: match a.loss {
            LossArg::V1 => LossVariant::V1,
            LossArg::V2 => LossVariant::V2,
        },
        init: match a.init {
            InitArg::Random => InitKind::Random,
            InitArg::Pretrained => InitKind::Pretrained,
        },
        optimizer: match a.optimizer {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Adam => OptimizerKind::Adam,
        },
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        seed: a.seed,
        cost: a.cost.model()?,
        alpha: a.alpha,
        normalized: !a.unnormalized,
        hidden: a.hidden.clone(),
        activation: Activation::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        },
        calibration_gradient: match a.calibration_gradient {
            CalibGradArg::Both => CalibrationGradient::Both,
            CalibGradArg::FusedOnly => CalibrationGradient::FusedOnly,
            CalibGradArg::AuxOnly => CalibrationGradient::AuxOnly,
        },
        pretrain_epochs: a.pretrain_epochs,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let asv = io::read_embeddings(&a.asv_emb).with_context(|| format!("reading {}", a.asv_emb.display()))?;
    let cm = io::read_embeddings(&a.cm_emb).with_context(|| format!("reading {}", a.cm_emb.display()))?;
    let train_proto =
        io::read_protocol(&a.train_proto).with_context(|| format!("reading {}", a.train_proto.display()))?;
    let dev_proto = io::read_protocol(&a.dev_proto).with_context(|| format!("reading {}", a.dev_proto.display()))?;
    let data = TrainData {
        asv: &asv,
        cm: &cm,
        train: &train_proto,
        dev: &dev_proto,
    };
    let out = train::train_joint(&cfg, &data)?;
    log::info!(
        "best dev min a-DCF {} at epoch {}",
        out.best.dev_min_adcf,
        out.best.epoch
    );
    if let Some(p) = &a.log {
        let mut text = String::new();
        for e in &out.log {
            let _ = writeln!(text, "{}", serde_json::to_string(e)?);
        }
        io::atomic_write(p, text.as_bytes())?;
    }
    io::write_checkpoint(&a.out, &out.best, Some(&cfg))?;
    Ok(())
}

fn det(a: DetArgs) -> Result<()> {
    let rows = read_scores(&a.scores)?;
    let [tar, non, spf] = split_by_class(&labelled(&rows));
    let neg = match a.negatives {
        Negatives::Nontarget => non,
        Negatives::Spoof => spf,
    };
    io::write_det(&a.out, &det_points(&tar, &neg)?)?;
    Ok(())
}

fn grid(a: GridArgs) -> Result<()> {
    let cost = a.cost.model()?;
    let fusion = match (&a.ckpt, a.mode) {
        (Some(p), _) => {
            let (ckpt, _) = io::read_checkpoint(p).with_context(|| format!("reading {}", p.display()))?;
            ckpt.params.fusion_config()
        }
        (None, Some(mode)) => {
            let mode: FusionMode = mode.into();
            let rho = match a.rho {
                Some(r) => r,
                None => cost.rho()?,
            };
            FusionConfig::new(mode, rho)?
        }
        (None, None) => bail!("either --ckpt or --mode is required"),
    };
    let spec = GridSpec {
        asv_min: a.asv_min,
        asv_max: a.asv_max,
        cm_min: a.cm_min,
        cm_max: a.cm_max,
        steps_asv: a.steps,
        steps_cm: a.steps,
    };
    io::write_grid(&a.out, &sim::boundary_grid(&fusion, &cost, &spec)?)?;
    Ok(())
}
