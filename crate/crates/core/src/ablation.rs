//! Architecture ablations trained under identical seeds and splits.

use serde::{Deserialize, Serialize};

use crate::compnet::{Model, NetConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvalReport, CLASS_NAMES};
use crate::meta_codec::MetadataSchema;
use crate::synth::Split;
use crate::trainer::{prepare_cases, train, TrainConfig};

pub const DISEASE_ENTITY: &str = "disease";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    Full,
    NoCmfi,
    NoSuper,
    NoDisease,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Full, Arm::NoCmfi, Arm::NoSuper, Arm::NoDisease];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoCmfi => "no-cmfi",
            Arm::NoSuper => "no-super",
            Arm::NoDisease => "no-disease",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown arm `{s}`; expected full, no-cmfi, no-super or no-disease")))
    }

    /// Network settings and metadata schema for this arm. Without the binary
    /// decoder the network also runs without fusion, which makes it the plain
    /// encoder-decoder baseline.
    pub fn configure(self, base: &NetConfig, schema: &MetadataSchema) -> Result<(NetConfig, MetadataSchema)> {
        let mut net = base.clone();
        let mut schema = schema.clone();
        match self {
            Arm::Full => {
                net.use_cmfi = true;
                net.use_super_decoder = true;
            }
            Arm::NoCmfi => {
                net.use_cmfi = false;
                net.decoder_cmfi = false;
                net.use_super_decoder = true;
            }
            Arm::NoSuper => {
                net.use_cmfi = false;
                net.decoder_cmfi = false;
                net.use_super_decoder = false;
            }
            Arm::NoDisease => {
                net.use_cmfi = true;
                net.use_super_decoder = true;
                schema = schema.without(DISEASE_ENTITY)?;
            }
        }
        Ok((net, schema))
    }
}

/// Train one arm on the train split, select on val and score on test.
pub fn run_arm(dataset: &Dataset, arm: Arm, base: &NetConfig, config: &TrainConfig) -> Result<(EvalReport, Model<f32>)> {
    let (net, schema) = arm.configure(base, &dataset.schema)?;
    let hw = net.input_hw;
    let train_cases = prepare_cases(&dataset.split(Split::Train), hw)?;
    let val = prepare_cases(&dataset.split(Split::Val), hw)?;
    let test = prepare_cases(&dataset.split(Split::Test), hw)?;
    if test.is_empty() {
        return Err(Error::Validation("the dataset has no test cases".into()));
    }
    let model = Model::new(&net, &schema, config.seed)?;
    let outcome = train(model, &train_cases, &val, config)?;
    Ok((evaluate(&outcome.model, &test)?, outcome.model))
}

/// Test-split scores of one arm averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub seeds: Vec<u64>,
    pub num_params: usize,
    /// LV, RV, MYO in percent.
    pub dice: [f64; 3],
    pub dice_mean: f64,
    /// LV, RV, MYO in millimetres.
    pub hd: [f64; 3],
    pub hd_mean: f64,
    /// Mean foreground Dice of each seed, in seed order.
    pub per_seed_dice: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, arm: Arm) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }

    /// Scores from desk-scale synthetic runs; the first line says so.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut out = b"# desk-scale synthetic phantoms; not comparable with clinical results\n".to_vec();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["arm".to_string(), "params".to_string()];
        header.extend(CLASS_NAMES.iter().map(|c| format!("dice_{c}")));
        header.push("dice_mean".into());
        header.extend(CLASS_NAMES.iter().map(|c| format!("hd_{c}")));
        header.push("hd_mean".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut line = vec![r.arm.as_str().to_string(), r.num_params.to_string()];
            line.extend(r.dice.iter().map(|v| format!("{v:.2}")));
            line.push(format!("{:.2}", r.dice_mean));
            line.extend(r.hd.iter().map(|v| format!("{v:.2}")));
            line.push(format!("{:.2}", r.hd_mean));
            w.write_record(&line)?;
        }
        out.extend(w.into_inner().map_err(|e| Error::io("<ablation>", e.into_error()))?);
        Ok(out)
    }
}

/// Train every arm once per seed on the same splits.
pub fn run_ablation_grid(
    dataset: &Dataset,
    base: &NetConfig,
    config: &TrainConfig,
    seeds: &[u64],
    arms: &[Arm],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    if arms.contains(&Arm::NoDisease) && dataset.schema.entity(DISEASE_ENTITY).is_none() {
        return Err(Error::Schema("the dataset schema has no disease entity".into()));
    }
    let mut rows = Vec::with_capacity(arms.len());
    for &arm in arms {
        let mut reports = Vec::with_capacity(seeds.len());
        let mut num_params = 0;
        for &seed in seeds {
            log::info!("ablation arm {} seed {seed}", arm.as_str());
            let cfg = TrainConfig { seed, ..config.clone() };
            let (report, model) = run_arm(dataset, arm, base, &cfg)?;
            num_params = model.num_params();
            reports.push(report);
        }
        let avg = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
        let dice = [0, 1, 2].map(|i| avg(&|r| r.class_dice(CLASS_NAMES[i])));
        let hd = [0, 1, 2].map(|i| avg(&|r| r.class_hd(CLASS_NAMES[i])));
        rows.push(AblationRow {
            arm,
            seeds: seeds.to_vec(),
            num_params,
            dice,
            dice_mean: avg(&|r| r.mean_foreground_dice()),
            hd,
            hd_mean: hd.iter().sum::<f64>() / 3.0,
            per_seed_dice: reports.iter().map(|r| r.mean_foreground_dice()).collect(),
        });
    }
    Ok(AblationTable { rows })
}
