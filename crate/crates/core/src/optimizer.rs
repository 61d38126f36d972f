//! Adaptive multi-rate gradient descent.
//!
//! The objective depends on K heterogeneous variable blocks (momenta, signal
//! values, vertex coordinates), each with its own step size δ_i. One outer
//! iteration proposes the joint update at the current steps, then an inner
//! round of rescaled candidates (each block alone at s·δ_i, plus all blocks
//! at s·δ), accepts the best strictly improving candidate, and otherwise
//! shrinks every step and retries. Accepted energies are strictly
//! decreasing by construction.

use std::time::Instant;

use crate::deformation::EnergyBreakdown;
use crate::error::{Error, Result};
use crate::fvarifold::KernelConfig;

/// One stage of a coarse-to-fine kernel schedule.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MultiscaleStage {
    pub kernel: KernelConfig,
    pub iters: usize,
}

/// Step-size policy and stopping rules.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    /// One initial step size per variable block.
    pub step_sizes: Vec<f64>,
    /// Shrink factor applied after a failed joint proposal, in (0, 1).
    pub s_minus: f64,
    /// Growth factor applied after a successful joint proposal, > 1.
    pub s_plus: f64,
    pub max_iters: usize,
    /// Stop when every δ falls below `min_step_rel · δ_init`.
    pub min_step_rel: f64,
    /// Stop when an accepted decrease falls below `min_decrease_rel · |J_init|`.
    pub min_decrease_rel: f64,
    /// Kernel schedule for [`multiscale_run`]; ignored by [`minimize`].
    pub schedule: Vec<MultiscaleStage>,
}

impl OptimizerConfig {
    pub fn new(step_sizes: Vec<f64>, max_iters: usize) -> Self {
        Self {
            step_sizes,
            s_minus: 0.5,
            s_plus: 1.2,
            max_iters,
            min_step_rel: 1e-12,
            min_decrease_rel: 1e-10,
            schedule: Vec::new(),
        }
    }

    fn validate(&self, blocks: usize) -> Result<()> {
        if self.step_sizes.len() != blocks {
            return Err(Error::validation(format!(
                "{} step sizes configured for {blocks} variable blocks",
                self.step_sizes.len()
            )));
        }
        if !self.step_sizes.iter().all(|d| d.is_finite() && *d > 0.0) {
            return Err(Error::validation("step sizes must be positive and finite"));
        }
        if !(self.s_minus > 0.0 && self.s_minus < 1.0 && self.s_plus > 1.0) {
            return Err(Error::validation(format!(
                "need 0 < s_minus < 1 < s_plus, got s_minus = {}, s_plus = {}",
                self.s_minus, self.s_plus
            )));
        }
        Ok(())
    }
}

/// Energy-plus-gradient oracle over K variable blocks (flat f64 arrays).
pub trait BlockObjective: Sync {
    fn block_count(&self) -> usize;
    fn energy(&self, blocks: &[Vec<f64>]) -> Result<EnergyBreakdown>;
    fn energy_and_gradient(&self, blocks: &[Vec<f64>]) -> Result<(EnergyBreakdown, Vec<Vec<f64>>)>;
}

/// Which candidate an iteration accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Winner {
    /// Joint update at the unscaled current steps.
    Joint,
    /// Single block at s·δ_i (others at δ_j).
    Block(usize),
    /// All blocks at s·δ.
    UniformRescaled,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub energy: EnergyBreakdown,
    pub accepted_steps: Vec<f64>,
    pub winner: Winner,
    /// Wall time is informational only; it is excluded from the CSV export
    /// and from reproducibility comparisons.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StopReason {
    MaxIterations,
    SmallDecrease,
    StepsExhausted,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunLog {
    /// Energy at the initial point, before any update.
    pub initial_energy: EnergyBreakdown,
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
}

impl RunLog {
    pub fn final_energy(&self) -> EnergyBreakdown {
        self.records
            .last()
            .map(|r| r.energy)
            .unwrap_or(self.initial_energy)
    }

    /// Accepted energies must strictly decrease.
    pub fn is_strictly_decreasing(&self) -> bool {
        let mut prev = self.initial_energy.total;
        for r in &self.records {
            if r.energy.total >= prev {
                return false;
            }
            prev = r.energy.total;
        }
        true
    }

    /// CSV with one row per accepted iteration:
    /// iteration,total,geometric,functional,attachment,delta_1..delta_K.
    pub fn to_csv(&self) -> String {
        let k = self
            .records
            .first()
            .map(|r| r.accepted_steps.len())
            .unwrap_or(0);
        let mut out = String::from("iteration,total,geometric,functional,attachment");
        for i in 1..=k {
            out.push_str(&format!(",delta_{i}"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e}",
                r.iteration, r.energy.total, r.energy.geometric, r.energy.functional, r.energy.attachment
            ));
            for d in &r.accepted_steps {
                out.push_str(&format!(",{d:.17e}"));
            }
            out.push('\n');
        }
        out
    }
}

fn non_finite_dump(context: &str, blocks: &[Vec<f64>]) -> Error {
    let mut dump = String::new();
    for (i, b) in blocks.iter().enumerate() {
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bad = b.iter().filter(|v| !v.is_finite()).count();
        dump.push_str(&format!(
            " block {i}: len {}, |u| = {norm:.6e}, non-finite entries {bad};",
            b.len()
        ));
    }
    Error::divergence(format!(
        "objective returned a non-finite value ({context}); state dump:{dump}"
    ))
}

struct Candidate {
    winner: Winner,
    steps: Vec<f64>,
}

fn apply_steps(base: &[Vec<f64>], grads: &[Vec<f64>], steps: &[f64]) -> Vec<Vec<f64>> {
    base.iter()
        .zip(grads)
        .zip(steps)
        .map(|((u, g), &d)| u.iter().zip(g).map(|(x, gx)| x - d * gx).collect())
        .collect()
}

/// Adaptive multi-rate descent over `objective`, starting from `init`.
/// Returns the final blocks plus the per-iteration log.
pub fn minimize(
    objective: &dyn BlockObjective,
    init: Vec<Vec<f64>>,
    cfg: &OptimizerConfig,
) -> Result<(Vec<Vec<f64>>, RunLog)> {
    let k = objective.block_count();
    if init.len() != k {
        return Err(Error::validation(format!(
            "{} initial blocks for an objective over {k} blocks",
            init.len()
        )));
    }
    cfg.validate(k)?;

    let started = Instant::now();
    let mut blocks = init;
    let mut deltas = cfg.step_sizes.clone();
    let min_steps: Vec<f64> = deltas.iter().map(|d| d * cfg.min_step_rel).collect();

    let initial_energy = objective.energy(&blocks)?;
    if !initial_energy.is_finite() {
        return Err(non_finite_dump("at the initial point", &blocks));
    }
    let min_decrease = cfg.min_decrease_rel * initial_energy.total.abs();

    let mut records = Vec::new();
    let mut stop = StopReason::MaxIterations;

    'outer: for iteration in 1..=cfg.max_iters {
        let (current, grads) = objective.energy_and_gradient(&blocks)?;
        if !current.is_finite() {
            return Err(non_finite_dump(&format!("iteration {iteration}"), &blocks));
        }

        // Joint proposal at the unscaled steps.
        let joint_blocks = apply_steps(&blocks, &grads, &deltas);
        let joint_energy = objective.energy(&joint_blocks)?;
        if !joint_energy.is_finite() {
            return Err(non_finite_dump(
                &format!("joint proposal, iteration {iteration}"),
                &joint_blocks,
            ));
        }
        let mut s = if joint_energy.total < current.total {
            cfg.s_plus
        } else {
            cfg.s_minus
        };

        loop {
            // Candidate set: joint first (tie-break order), then each block
            // alone at s·δ_i with the others at δ_j, then all at s·δ.
            let mut candidates = Vec::with_capacity(k + 2);
            candidates.push(Candidate {
                winner: Winner::Joint,
                steps: deltas.clone(),
            });
            for i in 0..k {
                let mut steps = deltas.clone();
                steps[i] *= s;
                candidates.push(Candidate {
                    winner: Winner::Block(i),
                    steps,
                });
            }
            candidates.push(Candidate {
                winner: Winner::UniformRescaled,
                steps: deltas.iter().map(|d| d * s).collect(),
            });

            let mut best: Option<(EnergyBreakdown, Candidate, Vec<Vec<f64>>)> = None;
            for cand in candidates {
                let proposal = if cand.winner == Winner::Joint {
                    joint_blocks.clone()
                } else {
                    apply_steps(&blocks, &grads, &cand.steps)
                };
                let e = if cand.winner == Winner::Joint {
                    joint_energy
                } else {
                    objective.energy(&proposal)?
                };
                if !e.is_finite() {
                    return Err(non_finite_dump(
                        &format!("candidate {:?}, iteration {iteration}", cand.winner),
                        &proposal,
                    ));
                }
                // Strict improvement over the best so far keeps the fixed
                // tie-break order (joint, block 0.., uniform).
                let improves = match &best {
                    None => e.total < current.total,
                    Some((be, _, _)) => e.total < be.total,
                };
                if improves {
                    best = Some((e, cand, proposal));
                }
            }

            match best {
                Some((e, cand, proposal)) => {
                    let decrease = current.total - e.total;
                    blocks = proposal;
                    deltas = cand.steps.clone();
                    records.push(IterationRecord {
                        iteration,
                        energy: e,
                        accepted_steps: cand.steps,
                        winner: cand.winner,
                        wall_ms: started.elapsed().as_secs_f64() * 1e3,
                    });
                    if decrease < min_decrease {
                        stop = StopReason::SmallDecrease;
                        break 'outer;
                    }
                    break;
                }
                None => {
                    // Nothing improved: shrink every step and retry.
                    for d in deltas.iter_mut() {
                        *d *= s;
                    }
                    if deltas.iter().zip(&min_steps).all(|(d, m)| d < m) {
                        stop = StopReason::StepsExhausted;
                        break 'outer;
                    }
                    // After a failed round only shrinking makes progress.
                    s = cfg.s_minus;
                }
            }
        }
    }

    Ok((
        blocks,
        RunLog {
            initial_energy,
            records,
            stop,
        },
    ))
}

/// Per-stage log of a multiscale run. `initial_energy` is re-evaluated under
/// the stage's kernel before any step, so the discontinuity at a stage
/// boundary is explicit in the output.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageLog {
    pub kernel: KernelConfig,
    pub log: RunLog,
}

/// Runs `minimize` once per schedule stage, warm-starting each stage from
/// the previous stage's blocks and rebuilding the objective under the
/// stage's kernel widths.
pub fn multiscale_run<O: BlockObjective>(
    make_objective: impl Fn(&KernelConfig) -> Result<O>,
    init: Vec<Vec<f64>>,
    cfg: &OptimizerConfig,
) -> Result<(Vec<Vec<f64>>, Vec<StageLog>)> {
    if cfg.schedule.is_empty() {
        return Err(Error::validation("multiscale schedule must not be empty"));
    }
    let mut blocks = init;
    let mut stages = Vec::with_capacity(cfg.schedule.len());
    for stage in &cfg.schedule {
        stage.kernel.validate()?;
        let objective = make_objective(&stage.kernel)?;
        let stage_cfg = OptimizerConfig {
            max_iters: stage.iters,
            schedule: Vec::new(),
            ..cfg.clone()
        };
        let (next, log) = minimize(&objective, blocks, &stage_cfg)?;
        blocks = next;
        stages.push(StageLog {
            kernel: stage.kernel,
            log,
        });
    }
    Ok((blocks, stages))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// J(u) = |u − u*|² over one block.
    struct Bowl {
        target: Vec<f64>,
    }

    impl BlockObjective for Bowl {
        fn block_count(&self) -> usize {
            1
        }

        fn energy(&self, blocks: &[Vec<f64>]) -> Result<EnergyBreakdown> {
            let v = blocks[0]
                .iter()
                .zip(&self.target)
                .map(|(u, t)| (u - t) * (u - t))
                .sum();
            Ok(EnergyBreakdown::scalar(v))
        }

        fn energy_and_gradient(
            &self,
            blocks: &[Vec<f64>],
        ) -> Result<(EnergyBreakdown, Vec<Vec<f64>>)> {
            let g = blocks[0]
                .iter()
                .zip(&self.target)
                .map(|(u, t)| 2.0 * (u - t))
                .collect();
            Ok((self.energy(blocks)?, vec![g]))
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let bowl = Bowl {
            target: vec![1.5, -2.0, 0.25],
        };
        let cfg = OptimizerConfig::new(vec![1.0], 200);
        let (u, log) = minimize(&bowl, vec![vec![10.0, 3.0, -7.0]], &cfg).unwrap();
        for (a, b) in u[0].iter().zip(&bowl.target) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(log.records.len() <= 200);
        assert!(log.is_strictly_decreasing());
    }

    #[test]
    fn stationary_point_stops_immediately() {
        let bowl = Bowl {
            target: vec![2.0, 2.0],
        };
        let cfg = OptimizerConfig::new(vec![0.3], 50);
        let (u, log) = minimize(&bowl, vec![vec![2.0, 2.0]], &cfg).unwrap();
        assert_eq!(u[0], vec![2.0, 2.0]);
        // Zero gradient: either no candidate improves (steps exhaust) or the
        // decrease is below threshold after one round.
        assert!(log.records.len() <= 1);
        assert!(matches!(
            log.stop,
            StopReason::SmallDecrease | StopReason::StepsExhausted
        ));
    }

    /// Two blocks with wildly different curvature: J = |u|² + 1e6·|v|².
    struct Anisotropic;

    impl BlockObjective for Anisotropic {
        fn block_count(&self) -> usize {
            2
        }

        fn energy(&self, blocks: &[Vec<f64>]) -> Result<EnergyBreakdown> {
            let a: f64 = blocks[0].iter().map(|u| u * u).sum();
            let b: f64 = blocks[1].iter().map(|v| 1e6 * v * v).sum();
            Ok(EnergyBreakdown::scalar(a + b))
        }

        fn energy_and_gradient(
            &self,
            blocks: &[Vec<f64>],
        ) -> Result<(EnergyBreakdown, Vec<Vec<f64>>)> {
            let ga = blocks[0].iter().map(|u| 2.0 * u).collect();
            let gb = blocks[1].iter().map(|v| 2e6 * v).collect();
            Ok((self.energy(blocks)?, vec![ga, gb]))
        }
    }

    #[test]
    fn per_block_adaptation_keeps_energy_decreasing() {
        let cfg = OptimizerConfig::new(vec![0.4, 0.4], 120);
        let (u, log) = minimize(&Anisotropic, vec![vec![3.0], vec![0.5]], &cfg).unwrap();
        assert!(log.is_strictly_decreasing());
        let final_energy = log.final_energy().total;
        assert!(final_energy < 1e-4 * (9.0 + 1e6 * 0.25));
        // The stiff block ends with a much smaller step than the soft one.
        let last = log.records.last().unwrap();
        assert!(last.accepted_steps[1] < last.accepted_steps[0]);
        assert!(u[1][0].abs() < 1e-2);
    }

    #[test]
    fn nan_objective_aborts_with_dump() {
        struct Poison;
        impl BlockObjective for Poison {
            fn block_count(&self) -> usize {
                1
            }
            fn energy(&self, blocks: &[Vec<f64>]) -> Result<EnergyBreakdown> {
                // Finite at the start, NaN once the point moves.
                let u = blocks[0][0];
                Ok(EnergyBreakdown::scalar(if u == 4.0 {
                    1.0
                } else {
                    f64::NAN
                }))
            }
            fn energy_and_gradient(
                &self,
                blocks: &[Vec<f64>],
            ) -> Result<(EnergyBreakdown, Vec<Vec<f64>>)> {
                Ok((self.energy(blocks)?, vec![vec![1.0]]))
            }
        }
        let cfg = OptimizerConfig::new(vec![1.0], 10);
        let err = minimize(&Poison, vec![vec![4.0]], &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite"), "{msg}");
        assert!(msg.contains("block 0"), "{msg}");
    }

    #[test]
    fn config_validation() {
        let bowl = Bowl { target: vec![0.0] };
        let mut cfg = OptimizerConfig::new(vec![1.0, 1.0], 10);
        assert!(minimize(&bowl, vec![vec![1.0]], &cfg).is_err());
        cfg = OptimizerConfig::new(vec![1.0], 10);
        cfg.s_minus = 1.5;
        assert!(minimize(&bowl, vec![vec![1.0]], &cfg).is_err());
    }

    #[test]
    fn runlog_csv_shape() {
        let bowl = Bowl {
            target: vec![1.0, 2.0],
        };
        let cfg = OptimizerConfig::new(vec![0.25], 20);
        let (_, log) = minimize(&bowl, vec![vec![0.0, 0.0]], &cfg).unwrap();
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,total,geometric,functional,attachment,delta_1"
        );
        let first = lines.next().unwrap();
        assert!(first.starts_with("1,"));
        assert_eq!(first.split(',').count(), 6);
    }

    #[test]
    fn determinism_across_runs() {
        let bowl = Bowl {
            target: vec![0.3, -0.7, 1.1],
        };
        let cfg = OptimizerConfig::new(vec![0.8], 60);
        let run = || {
            let (u, log) = minimize(&bowl, vec![vec![5.0, -5.0, 5.0]], &cfg).unwrap();
            (u, log.to_csv())
        };
        let (u1, csv1) = run();
        let (u2, csv2) = run();
        assert_eq!(csv1, csv2);
        assert_eq!(
            u1[0].iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            u2[0].iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn multiscale_requires_a_schedule() {
        let cfg = OptimizerConfig::new(vec![1.0], 5);
        let r = multiscale_run(
            |_| {
                Ok(Bowl {
                    target: vec![0.0],
                })
            },
            vec![vec![1.0]],
            &cfg,
        );
        assert!(r.is_err());
    }

    #[test]
    fn multiscale_single_stage_matches_minimize() {
        let mut cfg = OptimizerConfig::new(vec![1.0], 40);
        cfg.schedule = vec![MultiscaleStage {
            kernel: KernelConfig::new(1.0, 1.0, 1.0).unwrap(),
            iters: 40,
        }];
        let init = vec![vec![4.0, -2.0]];
        let (u_ms, stages) = multiscale_run(
            |_| {
                Ok(Bowl {
                    target: vec![1.0, 1.0],
                })
            },
            init.clone(),
            &cfg,
        )
        .unwrap();
        let (u_plain, log_plain) = minimize(
            &Bowl {
                target: vec![1.0, 1.0],
            },
            init,
            &OptimizerConfig::new(vec![1.0], 40),
        )
        .unwrap();
        assert_eq!(u_ms, u_plain);
        assert_eq!(stages.len(), 1);
        assert_eq!(stages[0].log.records.len(), log_plain.records.len());
    }
}
