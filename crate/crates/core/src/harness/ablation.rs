//! Four-arm ablation and single-hyperparameter sweeps.

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::{EpochRecord, MetricsReport};
use super::train::{train, TrainOutcome};
use crate::error::{Error, Result};
use crate::imbalance::Dataset;

/// Below this many seeds the summary makes no ordering claims.
pub const MIN_SEEDS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Baseline,
    RacOnly,
    RslOnly,
    Both,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::RacOnly, Arm::RslOnly, Arm::Both];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Arm::Baseline => (false, false),
            Arm::RacOnly => (true, false),
            Arm::RslOnly => (false, true),
            Arm::Both => (true, true),
        }
    }

    /// `base` with only the two module flags changed.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let (rac, rsl) = self.flags();
        TrainConfig {
            enable_rac: rac,
            enable_rsl: rsl,
            ..base.clone()
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::RacOnly => "RAC-only",
            Arm::RslOnly => "RSL-only",
            Arm::Both => "RAC+RSL",
        }
    }
}

/// Outcome of one training run inside a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    #[serde(rename = "final")]
    pub last: EpochRecord,
    pub best: EpochRecord,
}

impl RunResult {
    pub fn from_outcome(seed: u64, outcome: &TrainOutcome) -> Self {
        Self {
            seed,
            epochs: outcome.reports.iter().map(MetricsReport::to_record).collect(),
            last: outcome.final_report().to_record(),
            best: outcome.best_report().to_record(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRuns {
    pub arm: Arm,
    pub runs: Vec<RunResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmRuns>,
}

/// Seed-averaged last-epoch metrics of one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub mean_accuracy: f64,
    pub overall_accuracy: f64,
    /// Per class, averaged over the seeds in which the class was evaluated.
    pub per_class: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub claim: String,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Verdict {
    InsufficientSeeds { seeds: usize, required: usize },
    Checked { checks: Vec<OrderingCheck> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub class_names: Vec<String>,
    pub arms: Vec<ArmSummary>,
    pub verdict: Verdict,
}

impl AblationSummary {
    pub fn arm(&self, arm: Arm) -> &ArmSummary {
        self.arms.iter().find(|a| a.arm == arm).expect("all arms summarized")
    }

    /// `true` only when the ordering was checked and every claim held.
    pub fn ordering_holds(&self) -> bool {
        matches!(&self.verdict, Verdict::Checked { checks } if checks.iter().all(|c| c.holds))
    }
}

impl AblationGrid {
    pub fn arm_runs(&self, arm: Arm) -> &[RunResult] {
        self.arms
            .iter()
            .find(|a| a.arm == arm)
            .map(|a| a.runs.as_slice())
            .unwrap_or(&[])
    }

    pub fn summarize(&self, min_margin: f64) -> Result<AblationSummary> {
        let first = self
            .arms
            .iter()
            .flat_map(|a| a.runs.first())
            .next()
            .ok_or_else(|| Error::data("ablation grid has no runs"))?;
        let class_names: Vec<String> = first.last.per_class.keys().cloned().collect();
        let arms = Arm::ALL
            .iter()
            .map(|&arm| summarize_arm(arm, self.arm_runs(arm), class_names.len()))
            .collect::<Result<Vec<_>>>()?;
        let verdict = if self.seeds.len() < MIN_SEEDS {
            Verdict::InsufficientSeeds {
                seeds: self.seeds.len(),
                required: MIN_SEEDS,
            }
        } else {
            let m = |arm: Arm| arms.iter().find(|a| a.arm == arm).expect("arm").mean_accuracy;
            let (base, rac, rsl, both) = (m(Arm::Baseline), m(Arm::RacOnly), m(Arm::RslOnly), m(Arm::Both));
            let check = |claim: String, holds: bool| OrderingCheck { claim, holds };
            Verdict::Checked {
                checks: vec![
                    check(
                        format!("RAC+RSL exceeds baseline by at least {:.1} points", 100.0 * min_margin),
                        both - base >= min_margin,
                    ),
                    check("RAC-only exceeds baseline".into(), rac > base),
                    check("RSL-only at least baseline".into(), rsl >= base),
                    check("RAC+RSL at least RAC-only".into(), both >= rac),
                    check("RAC+RSL at least RSL-only".into(), both >= rsl),
                ],
            }
        };
        Ok(AblationSummary {
            class_names,
            arms,
            verdict,
        })
    }
}

fn summarize_arm(arm: Arm, runs: &[RunResult], num_classes: usize) -> Result<ArmSummary> {
    if runs.is_empty() {
        return Err(Error::data(format!("arm {} has no runs", arm.label())));
    }
    let n = runs.len() as f64;
    let per_class = (0..num_classes)
        .map(|k| {
            let seen: Vec<f64> = runs.iter().filter_map(|r| r.last.per_class[k]).collect();
            (!seen.is_empty()).then(|| seen.iter().sum::<f64>() / seen.len() as f64)
        })
        .collect();
    Ok(ArmSummary {
        arm,
        mean_accuracy: runs.iter().map(|r| r.last.mean).sum::<f64>() / n,
        overall_accuracy: runs.iter().map(|r| r.last.overall).sum::<f64>() / n,
        per_class,
    })
}

/// Trains every arm for every seed on the same data. Within a seed the arms
/// share initialization, batch order and transform draws.
pub fn run_ablation(base: &TrainConfig, seeds: &[u64], train_ds: &Dataset, eval_ds: &Dataset) -> Result<AblationGrid> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    if seeds.len() < MIN_SEEDS {
        log::warn!("{} seed(s) given; the ablation summary needs {MIN_SEEDS} to judge ordering", seeds.len());
    }
    let mut arms: Vec<ArmRuns> = Arm::ALL.iter().map(|&arm| ArmRuns { arm, runs: Vec::new() }).collect();
    for &seed in seeds {
        for slot in &mut arms {
            let cfg = TrainConfig {
                seed,
                ..slot.arm.configure(base)
            };
            let outcome = train(&cfg, train_ds, eval_ds)?;
            let r = outcome.final_report();
            log::info!(
                "{:<9} seed {seed}: overall {:.4} mean {:.4}",
                slot.arm.label(),
                r.overall_accuracy,
                r.mean_accuracy
            );
            slot.runs.push(RunResult::from_outcome(seed, &outcome));
        }
    }
    Ok(AblationGrid {
        config: base.clone(),
        seeds: seeds.to_vec(),
        arms,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Lambda,
    Alpha,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Alpha => "alpha",
        }
    }

    /// Values examined by default: λ over the range studied for the
    /// consistency weight, α over a matching spread of smoothing strengths.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepParam::Lambda => vec![0.05, 0.1, 0.5, 1.0, 2.0, 4.0],
            SweepParam::Alpha => vec![0.0, 0.05, 0.1, 0.2, 0.4],
        }
    }

    fn apply(self, cfg: &mut TrainConfig, value: f64) {
        match self {
            SweepParam::Lambda => cfg.lambda = value,
            SweepParam::Alpha => cfg.alpha = value,
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Self::Lambda),
            "alpha" => Ok(Self::Alpha),
            other => Err(Error::config(format!("cannot sweep `{other}` (expected lambda or alpha)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    /// Seed-averaged last-epoch accuracies.
    pub mean_accuracy: f64,
    pub overall_accuracy: f64,
    pub runs: Vec<RunResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub config: TrainConfig,
    pub points: Vec<SweepPoint>,
}

/// Trains the full method (both modules on) once per value and seed.
pub fn run_sweep(
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
    train_ds: &Dataset,
    eval_ds: &Dataset,
) -> Result<Sweep> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep needs at least one value and one seed"));
    }
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = Arm::Both.configure(base);
            cfg.seed = seed;
            param.apply(&mut cfg, value);
            cfg.validate()?;
            let outcome = train(&cfg, train_ds, eval_ds)?;
            runs.push(RunResult::from_outcome(seed, &outcome));
        }
        let n = runs.len() as f64;
        let point = SweepPoint {
            value,
            mean_accuracy: runs.iter().map(|r| r.last.mean).sum::<f64>() / n,
            overall_accuracy: runs.iter().map(|r| r.last.overall).sum::<f64>() / n,
            runs,
        };
        log::info!("{} = {value}: mean {:.4}", param.name(), point.mean_accuracy);
        points.push(point);
    }
    Ok(Sweep {
        param,
        config: base.clone(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;

    fn record(mean: f64, per: &[Option<f64>]) -> EpochRecord {
        EpochRecord {
            epoch: 1,
            split: "test".into(),
            per_class: per.iter().enumerate().map(|(k, &a)| (format!("c{k}"), a)).collect::<IndexMap<_, _>>(),
            overall: mean,
            mean,
            confusion: vec![vec![0; per.len()]; per.len()],
            empty_classes: vec![],
        }
    }

    fn grid(means: [f64; 4], seeds: usize) -> AblationGrid {
        AblationGrid {
            config: TrainConfig::default(),
            seeds: (0..seeds as u64).collect(),
            arms: Arm::ALL
                .iter()
                .zip(means)
                .map(|(&arm, m)| ArmRuns {
                    arm,
                    runs: (0..seeds as u64)
                        .map(|seed| {
                            let r = record(m, &[Some(m), None]);
                            RunResult {
                                seed,
                                epochs: vec![r.clone()],
                                last: r.clone(),
                                best: r,
                            }
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn arms_differ_only_in_flags() {
        let base = TrainConfig {
            lambda: 0.7,
            seed: 9,
            ..Default::default()
        };
        for arm in Arm::ALL {
            let mut c = arm.configure(&base);
            let (rac, rsl) = arm.flags();
            assert_eq!((c.enable_rac, c.enable_rsl), (rac, rsl));
            c.enable_rac = base.enable_rac;
            c.enable_rsl = base.enable_rsl;
            assert_eq!(c, base);
        }
    }

    #[test]
    fn single_seed_is_insufficient() {
        let s = grid([0.5, 0.6, 0.6, 0.7], 1).summarize(0.03).unwrap();
        assert!(matches!(s.verdict, Verdict::InsufficientSeeds { seeds: 1, .. }));
        assert!(!s.ordering_holds());
    }

    #[test]
    fn ordering_checks() {
        let good = grid([0.50, 0.52, 0.51, 0.56], 3).summarize(0.03).unwrap();
        assert!(good.ordering_holds());
        assert_eq!(good.arm(Arm::Both).per_class, vec![Some(0.56), None]);

        let narrow = grid([0.50, 0.52, 0.51, 0.52], 3).summarize(0.03).unwrap();
        assert!(!narrow.ordering_holds());
        let Verdict::Checked { checks } = narrow.verdict else { panic!() };
        assert_eq!(checks.iter().filter(|c| !c.holds).count(), 1);
    }

    #[test]
    fn sweep_param_parsing() {
        assert_eq!("lambda".parse::<SweepParam>().unwrap(), SweepParam::Lambda);
        assert!("beta".parse::<SweepParam>().is_err());
    }
}
