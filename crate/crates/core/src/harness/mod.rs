//! Experiment orchestration. A run is described by one TOML file
//! ([`RunConfig`]); [`run_experiment`] validates it in full, then writes
//! everything it produces into `out/<run id>/`:
//!
//! | file | content |
//! |------|---------|
//! | `config.toml` | the resolved configuration |
//! | `metrics.jsonl` | [`MetricRecord`] lines |
//! | `train_log.jsonl` | one fine-tuning record per iteration |
//! | `samples.csv` | terminal samples |
//! | `trajectories.csv` | the first few full chains with log-densities |
//! | `diagnostics.jsonl` | per-step guidance shift norms and ESS |
//! | `value_slices.csv` | value function on an `x` grid at a few steps |
//! | `*.ckpt`, `checkpoints/` | parameter checkpoints |
//!
//! The run id is `<kind>-s<seed>-<hash of the config>`, so the same
//! configuration always lands in the same directory and rewrites it.

mod config;
mod io;
mod metrics;
mod plot;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub use config::{
    build_reward, BaseSpec, BlackBoxName, ConditionalConfig, ConditionalMethodName, Estimator, EvalConfig,
    ExperimentKind, GuideConfig, OracleCheck, OracleConfig, PolicySource, RewardConfig, RunConfig, ScheduleSpec,
    SweepConfig,
};
pub use io::{read_jsonl, read_samples, write_samples, MetricLog};
pub use metrics::{eval_metrics, MetricRecord, MetricSet, Reference};
pub use plot::{emit_plotdata, HISTOGRAM_BINS};

use crate::diffusion::{sample_trajectories, BaseDistribution, EpsModel, PolicyNet, TrajectoryBatch};
use crate::error::{config_err, Error, Result};
use crate::finetune::{batch_kl, FineTuner};
use crate::guidance::{
    conditional_generate, fit_value_mc, fit_value_softq, value_weighted_sample, ConditionalMethod, GuidanceSource,
    GuidedPolicy, ValueModel,
};
use crate::oracle::{
    grid_build, grid_soft_solve, mala_sample, verify_theorems, AffineChain, GridMDP, MalaConfig, TheoremReport,
};
use crate::rewards::RewardSpec;
use crate::rng::Stream;
use crate::tensor::{Checkpoint, DenseArray};

// stream ids under the run seed
const PRETRAIN_STREAM: u64 = 10;
const EVAL_STREAM: u64 = 20;
const VALUE_FIT_STREAM: u64 = 30;
const GUIDED_STREAM: u64 = 40;
const REWARD_STREAM: u64 = 50;
const MALA_STREAM: u64 = 60;

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_id: String,
    pub dir: PathBuf,
    pub metrics: Vec<MetricRecord>,
    /// Member runs of a sweep.
    pub members: Vec<RunSummary>,
}

impl RunSummary {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().rev().find(|r| r.metric == name).and_then(|r| r.value)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// `<kind>-s<seed>-<hash>`; the output directory does not enter the hash.
pub fn run_id(config: &RunConfig) -> Result<String> {
    let mut c = config.clone();
    c.out = PathBuf::new();
    let h = fnv1a(c.to_toml()?.as_bytes());
    Ok(format!("{}-s{}-{:08x}", config.kind.name(), config.seed, h as u32))
}

struct Ctx<'a> {
    config: &'a RunConfig,
    run_id: String,
    dir: PathBuf,
    log: MetricLog,
}

impl Ctx<'_> {
    fn stream(&self, id: u64) -> Stream {
        Stream::new(self.config.seed, id)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Dump samples and score them against the analytic target if one exists.
    fn finish_samples(&mut self, samples: &DenseArray, batch: Option<&TrajectoryBatch>, reward: Option<&RewardSpec>) -> Result<()> {
        io::write_samples(&self.path("samples.csv"), &self.run_id, samples)?;
        if let Some(b) = batch {
            io::write_trajectories(&self.path("trajectories.csv"), &self.run_id, b, self.config.eval.dump_trajectories)?;
        }
        let n = samples.rows();
        if let Some(r) = reward {
            let v = r.eval_batch(samples)?;
            self.log.record("eval.mean_reward", v.iter().sum::<f64>() / n as f64, n);
        }
        let target = self.config.analytic_target()?;
        if let Some(t) = target {
            let m = eval_metrics(samples, &Reference::Analytic(t), None)?;
            for (k, v) in m.entries() {
                self.log.record(format!("eval.{k}"), v, n);
            }
        }
        Ok(())
    }
}

/// Validate `config` and execute the requested pipeline end to end.
pub fn run_experiment(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let id = run_id(config)?;
    let dir = config.out.join(&id);
    if dir.join("checkpoints").exists() {
        fs::remove_dir_all(dir.join("checkpoints"))?;
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), config.to_toml()?)?;
    let mut ctx = Ctx {
        config,
        run_id: id.clone(),
        dir: dir.clone(),
        log: MetricLog::new(&id),
    };
    log::info!("run {id} -> {}", dir.display());
    let mut members = vec![];
    let outcome = match config.kind {
        ExperimentKind::Pretrain => run_pretrain(&mut ctx),
        ExperimentKind::Finetune => run_finetune(&mut ctx),
        ExperimentKind::Guide => run_guide(&mut ctx),
        ExperimentKind::Oracle => run_oracle(&mut ctx),
        ExperimentKind::Conditional => run_conditional(&mut ctx),
        ExperimentKind::Sweep => run_sweep(&mut ctx).map(|m| members = m),
    };
    // metrics are written even when a check fails
    ctx.log.write(&dir.join("metrics.jsonl"))?;
    outcome?;
    Ok(RunSummary {
        run_id: id,
        dir,
        metrics: ctx.log.records().to_vec(),
        members,
    })
}

fn run_pretrain(ctx: &mut Ctx) -> Result<()> {
    let c = ctx.config;
    let base = c.base_built()?;
    let schedule = c.schedule_built()?;
    let (net, report) = crate::diffusion::pretrain_denoiser(&base, &schedule, &c.pretrain, &mut ctx.stream(PRETRAIN_STREAM))?;
    let mut ck = Checkpoint::new();
    ck.insert_meta("schedule.steps", schedule.steps());
    ck.insert_meta("schedule.horizon", format!("{:e}", schedule.horizon()));
    ck.push_mlp("denoiser", &net);
    ck.save(&ctx.path("denoiser.ckpt"))?;
    let tail = &report.losses[report.losses.len().saturating_sub(100)..];
    ctx.log.record("pretrain.final_loss", tail.iter().sum::<f64>() / tail.len() as f64, c.pretrain.batch_size);
    ctx.log.record("pretrain.zero_baseline", report.zero_baseline, c.pretrain.batch_size);
    ctx.log.record("pretrain.holdout_loss", report.holdout, c.pretrain.batch_size);
    let policy = PolicyNet::new(schedule, EpsModel::Network(net))?;
    let batch = sample_trajectories(&policy, c.eval.samples, &mut ctx.stream(EVAL_STREAM))?;
    ctx.finish_samples(batch.terminal(), Some(&batch), None)
}

fn make_reward(ctx: &Ctx, base: &BaseDistribution) -> Result<RewardSpec> {
    let cfg = ctx.config.reward.as_ref().ok_or_else(|| config_err("this run needs a [reward] table"))?;
    build_reward(cfg, base, Some(&mut ctx.stream(REWARD_STREAM)))
}

fn run_finetune(ctx: &mut Ctx) -> Result<()> {
    let c = ctx.config;
    let base = c.base_built()?;
    let pretrained = c.pretrained_policy()?;
    let reward = make_reward(ctx, &base)?;
    let algorithm = c.algorithm.ok_or_else(|| config_err("finetune runs need `algorithm`"))?;
    let mut cfg = c.finetune.clone();
    cfg.seed = c.seed;
    let every = cfg.checkpoint_every;
    let mut tuner = FineTuner::new(algorithm, &pretrained, reward.clone(), cfg)?;
    if every > 0 {
        fs::create_dir_all(ctx.path("checkpoints"))?;
    }
    let mut log_file = BufWriter::new(File::create(ctx.path("train_log.jsonl"))?);
    let ck_dir = ctx.path("checkpoints");
    tuner.run(|t, rec| {
        io::append_jsonl(&mut log_file, rec)?;
        if every > 0 && (rec.iteration + 1) % every == 0 {
            t.checkpoint().save(&ck_dir.join(format!("iter-{:06}.ckpt", rec.iteration + 1)))?;
        }
        Ok(())
    })?;
    std::io::Write::flush(&mut log_file)?;
    tuner.checkpoint().save(&ctx.path("policy.ckpt"))?;
    let last = tuner.log().last().expect("at least one iteration").clone();
    let m = c.finetune.batch_size;
    ctx.log.record("train.iterations", tuner.iteration() as f64, m);
    ctx.log.record("train.final_loss", last.loss, m);
    ctx.log.record("train.final_mean_reward", last.mean_reward, m);
    ctx.log.record("train.final_kl_penalty", last.kl_penalty, m);
    let batch = sample_trajectories(&tuner.policy, c.eval.samples, &mut ctx.stream(EVAL_STREAM))?;
    let kl = batch_kl(&tuner.policy, &pretrained, &batch)?;
    ctx.log.record("eval.kl_penalty", kl.iter().sum::<f64>() / kl.len() as f64, kl.len());
    ctx.finish_samples(batch.terminal(), Some(&batch), Some(&reward))
}

fn slice_steps(big_t: usize) -> Vec<usize> {
    let mut s: Vec<usize> = [0, big_t / 4, big_t / 2, 3 * big_t / 4, big_t].to_vec();
    s.dedup();
    s
}

/// Value function on a grid of the first coordinate (others held at 0).
fn write_value_slices(ctx: &Ctx, fitted: Option<&ValueModel>, exact: Option<(&AffineChain, &[f64])>, dim: usize, big_t: usize) -> Result<()> {
    let alpha = ctx.config.guide.alpha;
    let mut rows = vec![];
    for t in slice_steps(big_t) {
        for i in 0..=60 {
            let mut x = vec![0.0; dim];
            x[0] = -3.0 + 0.1 * i as f64;
            let value = match fitted {
                Some(m) => format!("{:e}", m.value(&x, t)?),
                None => String::new(),
            };
            let exact = match exact {
                Some((chain, slope)) => format!("{:e}", chain.value(slope, alpha, &x, t)?),
                None => String::new(),
            };
            rows.push(vec![t.to_string(), format!("{:e}", x[0]), value, exact]);
        }
    }
    io::write_table(&ctx.path("value_slices.csv"), &["t", "x", "value", "exact"], &rows)
}

fn run_guide(ctx: &mut Ctx) -> Result<()> {
    let c = ctx.config;
    let g = &c.guide;
    let base = c.base_built()?;
    let pretrained = c.pretrained_policy()?;
    let reward = make_reward(ctx, &base)?;
    let big_t = pretrained.schedule().steps();
    let exact_chain = match (&reward, base.components(), &c.policy) {
        (RewardSpec::Linear { a }, 1, PolicySource::Analytic) => {
            Some((AffineChain::new(&base, pretrained.schedule())?, a.clone()))
        }
        _ => None,
    };
    let mut fitted = None;
    let source = match g.estimator {
        Estimator::Zero => GuidanceSource::Zero,
        Estimator::ExactAffine => {
            let (chain, slope) = exact_chain.clone().ok_or_else(|| config_err("exact-affine guidance needs a linear reward"))?;
            GuidanceSource::ExactAffine { chain, slope }
        }
        Estimator::MonteCarlo | Estimator::SoftQ => {
            let mut rng = ctx.stream(VALUE_FIT_STREAM);
            let (model, report) = if g.estimator == Estimator::MonteCarlo {
                fit_value_mc(&pretrained, &reward, g.alpha, &g.value_fit, &mut rng)?
            } else {
                fit_value_softq(&pretrained, &reward, g.alpha, &g.value_fit, &mut rng)?
            };
            model.to_checkpoint().save(&ctx.path("value.ckpt"))?;
            let last = *report.final_losses.last().expect("one fit");
            ctx.log.record("fit.final_loss", last, report.samples);
            fitted = Some(model.clone());
            GuidanceSource::Fitted(model)
        }
        Estimator::Tweedie => GuidanceSource::Tweedie(reward.clone()),
        Estimator::PathIntegral => GuidanceSource::PathIntegral {
            reward: reward.clone(),
            samples: g.path_samples,
            seed: c.seed,
        },
    };
    if fitted.is_some() || g.estimator == Estimator::ExactAffine {
        let exact = exact_chain.as_ref().map(|(ch, s)| (ch, s.as_slice()));
        write_value_slices(ctx, fitted.as_ref(), exact, base.dim(), big_t)?;
    }
    let guided = GuidedPolicy::new(&pretrained, source, g.alpha)?;
    let out = value_weighted_sample(&guided, c.eval.samples, &mut ctx.stream(GUIDED_STREAM))?;
    io::write_jsonl(&ctx.path("diagnostics.jsonl"), &out.diagnostics)?;
    let max_shift = out.diagnostics.iter().map(|d| d.mean_shift_norm).fold(0.0, f64::max);
    ctx.log.record("guide.max_mean_shift_norm", max_shift, c.eval.samples);
    if let Some(ess) = out.diagnostics.iter().filter_map(|d| d.min_ess).reduce(f64::min) {
        ctx.log.record("guide.min_ess", ess, g.path_samples);
    }
    ctx.finish_samples(out.batch.terminal(), Some(&out.batch), Some(&reward))
}

/// Uniform two-state kernel with rewards `(0, ln 2)` at `alpha = 1`:
/// `v_1 = ln 1.5` and the soft-optimal kernel is `(1/3, 2/3)` from either state.
pub fn two_state_instance() -> GridMDP {
    GridMDP::from_parts(vec![0.0, 1.0], vec![vec![0.5; 4]], vec![0.5, 0.5], vec![0.0, 2f64.ln()], 1.0)
        .expect("valid two-state instance")
}

fn record_theorems(log: &mut MetricLog, rep: &TheoremReport, n: usize) {
    log.record("oracle.terminal_tilt", rep.terminal_tilt, n);
    log.record("oracle.marginal_tilt", rep.marginal_tilt, n);
    log.record("oracle.constant_spread", rep.constant_spread, n);
    log.record("oracle.posterior", rep.posterior, n);
    log.record("oracle.bellman", rep.bellman, n);
}

fn run_oracle(ctx: &mut Ctx) -> Result<()> {
    let c = ctx.config;
    let o = &c.oracle;
    let mut worst = 0.0f64;
    match o.check {
        OracleCheck::GridTheorems | OracleCheck::TwoState => {
            let mdp = if o.check == OracleCheck::TwoState {
                two_state_instance()
            } else {
                let base = c.base_built()?;
                let reward = make_reward(ctx, &base)?;
                grid_build(&c.pretrained_policy()?, &o.grid, &reward, o.alpha)?
            };
            let sol = grid_soft_solve(&mdp)?;
            let rep = verify_theorems(&sol, &mdp);
            record_theorems(&mut ctx.log, &rep, mdp.len());
            worst = rep.max();
            if o.check == OracleCheck::TwoState {
                let hand = sol.values[1].iter().map(|v| (v - 1.5f64.ln()).abs()).fold(0.0, f64::max);
                let kernel = sol.policies[0]
                    .chunks(2)
                    .map(|row| (row[0] - 1.0 / 3.0).abs().max((row[1] - 2.0 / 3.0).abs()))
                    .fold(0.0, f64::max);
                ctx.log.record("oracle.two_state_value", hand, 2);
                ctx.log.record("oracle.two_state_policy", kernel, 2);
                worst = worst.max(hand).max(kernel);
            }
            let mut rows = vec![];
            for t in 0..=mdp.steps {
                for (i, x) in mdp.nodes.iter().enumerate() {
                    rows.push(vec![
                        t.to_string(),
                        format!("{x:e}"),
                        format!("{:e}", sol.pretrained_marginals[t][i]),
                        format!("{:e}", sol.marginals[t][i]),
                        format!("{:e}", sol.values[t][i]),
                    ]);
                }
            }
            io::write_table(
                &ctx.path("grid_solution.csv"),
                &["t", "x", "pretrained_marginal", "optimal_marginal", "value"],
                &rows,
            )?;
        }
        OracleCheck::Mala => {
            let base = c.base_built()?;
            let reward = make_reward(ctx, &base)?;
            let alpha = o.alpha;
            let target = c.analytic_target()?;
            let log_density = |x: &[f64]| -> (f64, Vec<f64>) {
                match &target {
                    Some(t) => (t.log_density(x).unwrap_or(f64::NEG_INFINITY), t.score(x).unwrap_or_default()),
                    None => {
                        let lp = base.log_density(x).unwrap_or(f64::NEG_INFINITY) + reward.eval(x).unwrap_or(f64::NAN) / alpha;
                        let mut g = base.score(x).unwrap_or_default();
                        if let Ok(gr) = reward.gradient(x) {
                            for (a, b) in g.iter_mut().zip(gr) {
                                *a += b / alpha;
                            }
                        }
                        (lp, g)
                    }
                }
            };
            let cfg = MalaConfig {
                samples: c.eval.samples,
                step: o.mala_step,
                correction: true,
            };
            let res = mala_sample(log_density, &base.mean(), &cfg, &mut ctx.stream(MALA_STREAM))?;
            ctx.log.record("mala.acceptance_rate", res.acceptance_rate, res.chain_length);
            let d = base.dim();
            let x = DenseArray::matrix(res.samples.len(), d, res.samples.concat())?;
            ctx.finish_samples(&x, None, Some(&reward))?;
            if res.poorly_tuned {
                log::warn!("MALA acceptance rate {:.3} is below 5%", res.acceptance_rate);
            }
        }
    }
    if worst > o.tolerance {
        return Err(Error::Numeric(format!(
            "oracle deviation {worst:e} exceeds tolerance {:e}",
            o.tolerance
        )));
    }
    Ok(())
}

fn run_conditional(ctx: &mut Ctx) -> Result<()> {
    let c = ctx.config;
    let cc = &c.conditional;
    let base = c.base_built()?;
    let pretrained = c.pretrained_policy()?;
    let method = match cc.method.algorithm() {
        None => ConditionalMethod::ValueWeighted,
        Some(algorithm) => ConditionalMethod::Finetune {
            algorithm,
            config: crate::finetune::FineTuneConfig {
                seed: c.seed,
                ..c.finetune.clone()
            },
        },
    };
    let out = conditional_generate(&pretrained, &base, cc.label, &method, c.eval.samples, &mut ctx.stream(GUIDED_STREAM))?;
    if !out.log.is_empty() {
        io::write_jsonl(&ctx.path("train_log.jsonl"), &out.log)?;
    }
    let n = out.samples.rows();
    let mut hits = 0usize;
    for r in 0..n {
        let resp = base.log_responsibilities(out.samples.row(r))?;
        let best = resp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("non-empty mixture");
        hits += (best == cc.label) as usize;
    }
    ctx.log.record("conditional.label_fraction", hits as f64 / n as f64, n);
    if let Some(g) = &cc.grid {
        let reward = RewardSpec::classifier(base.clone(), cc.label)?;
        let mdp = grid_build(&PolicyNet::analytic(c.schedule_built()?, base.clone()), g, &reward, 1.0)?;
        let sol = grid_soft_solve(&mdp)?;
        ctx.log.record("conditional.grid_bayes_deviation", grid_bayes_deviation(&mdp, &sol.marginals[0])?, mdp.len());
    }
    let reward = RewardSpec::classifier(base.clone(), cc.label)?;
    ctx.finish_samples(&out.samples, None, Some(&reward))
}

/// Largest gap between a terminal grid law and the discretized Bayes
/// posterior `p(y | x_i) p_0(i) / sum_j p(y | x_j) p_0(j)`.
pub fn grid_bayes_deviation(mdp: &GridMDP, terminal: &[f64]) -> Result<f64> {
    let pre = mdp.pretrained_marginals();
    let joint: Vec<f64> = (0..mdp.len()).map(|i| (mdp.reward[i]).exp() * pre[0][i]).collect();
    let z: f64 = joint.iter().sum();
    Ok(joint
        .iter()
        .zip(terminal)
        .map(|(p, q)| (p / z - q).abs())
        .fold(0.0, f64::max))
}

fn run_sweep(ctx: &mut Ctx) -> Result<Vec<RunSummary>> {
    let c = ctx.config;
    let sweep = c.sweep.as_ref().ok_or_else(|| config_err("sweep runs need a [sweep] table"))?;
    let mut members = c.sweep_members()?;
    for m in &mut members {
        m.out = ctx.dir.clone();
    }
    let threads = match sweep.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(members.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new((0..members.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= members.len() {
                    break;
                }
                let r = run_experiment(&members[i]);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let mut done = vec![];
    let mut first_err = None;
    let mut rows = vec![];
    for (m, r) in members.iter().zip(results.into_inner().expect("results lock")) {
        match r.expect("every member ran") {
            Ok(summary) => {
                let recs: Vec<MetricRecord> = read_jsonl(&summary.dir.join("metrics.jsonl"))?;
                for rec in recs {
                    rows.push(vec![
                        rec.run_id,
                        m.seed.to_string(),
                        format!("{:e}", m.alpha()),
                        rec.metric,
                        rec.value.map_or(String::new(), |v| format!("{v:e}")),
                    ]);
                }
                done.push(summary);
            }
            Err(e) => {
                log::error!("sweep member seed {} failed: {e}", m.seed);
                first_err.get_or_insert(e);
            }
        }
    }
    io::write_table(&ctx.path("summary.csv"), &["run_id", "seed", "alpha", "metric", "value"], &rows)?;
    ctx.log.record("sweep.completed", done.len() as f64, members.len());
    match first_err {
        Some(e) => Err(e),
        None => Ok(done),
    }
}

/// Score a finished run's `samples.csv` against a second sample file or,
/// without one, against the analytic target of its configuration. The
/// result is written to `eval.jsonl` in the run directory.
pub fn eval_run(dir: &Path, reference: Option<&Path>) -> Result<MetricSet> {
    let samples = read_samples(&dir.join("samples.csv"))?;
    let config = RunConfig::load(&dir.join("config.toml")).ok();
    let reference = match reference {
        Some(p) => Reference::Samples(read_samples(p)?),
        None => {
            let target = match &config {
                Some(c) => c.analytic_target()?,
                None => None,
            };
            Reference::Analytic(target.ok_or_else(|| {
                config_err("no analytic target for this run; pass a reference sample file")
            })?)
        }
    };
    let reward = match config.as_ref().and_then(|c| c.reward.as_ref().map(|r| (c, r))) {
        Some((c, r)) if !matches!(r, RewardConfig::Learned { .. }) => Some(build_reward(r, &c.base_built()?, None)?),
        _ => None,
    };
    let m = eval_metrics(&samples, &reference, reward.as_ref())?;
    let id = dir.file_name().map_or("eval".into(), |s| s.to_string_lossy().into_owned());
    let mut log = MetricLog::new(&id);
    for (k, v) in m.entries() {
        log.record(k, v, m.samples);
    }
    log.write(&dir.join("eval.jsonl"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_ignores_output_directory() {
        let mut a = RunConfig::new(ExperimentKind::Oracle);
        a.oracle.check = OracleCheck::TwoState;
        let mut b = a.clone();
        b.out = PathBuf::from("/elsewhere");
        assert_eq!(run_id(&a).unwrap(), run_id(&b).unwrap());
        b.seed = 4;
        assert_ne!(run_id(&a).unwrap(), run_id(&b).unwrap());
        assert!(run_id(&b).unwrap().starts_with("oracle-s4-"));
    }

    #[test]
    fn bayes_deviation_zero_for_tilt() {
        let mdp = two_state_instance();
        let sol = grid_soft_solve(&mdp).unwrap();
        assert!(grid_bayes_deviation(&mdp, &sol.marginals[0]).unwrap() < 1e-15);
    }
}
