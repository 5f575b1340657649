//! Particle gradient flows `Ẋ = −N ∇_X L(1/N Σ δ_{X_i}, β)` integrated with
//! explicit Euler steps.
//!
//! The factor `N` turns the partial derivative `∂L/∂x_i = α_i ∇φ(x_i)` back
//! into the velocity field `−∇φ(x_i)`, so time is measured in the same units
//! whatever the number of particles.
//!
//! Frames are snapshots taken at the Euler step nearest to each requested
//! time; both the requested time and the time of that step are recorded.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::divergence::{evaluate, Loss, WarmStart};
use crate::error::{Error, Result};
use crate::measure::DiscreteMeasure;
use crate::solver::SolverParams;

/// Record times used when none are given.
pub const DEFAULT_RECORD_TIMES: [f64; 5] = [0.0, 0.25, 0.5, 1.0, 5.0];

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub loss: Loss,
    /// Cost, tolerances and engine for the entropic losses; ignored by MMD.
    pub params: SolverParams,
    pub dt: f64,
    pub t_end: f64,
    pub record_times: Vec<f64>,
    /// Seed of any random initialization done by the caller; stored in the
    /// manifest only.
    pub seed: Option<u64>,
}

impl FlowConfig {
    /// `dt = 1e−2`, `t_end = 5` and the default record times.
    pub fn new(loss: Loss, params: SolverParams) -> Self {
        Self {
            loss,
            params,
            dt: 1e-2,
            t_end: 5.0,
            record_times: DEFAULT_RECORD_TIMES.to_vec(),
            seed: None,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    /// Also drops record times beyond the new horizon.
    pub fn with_t_end(mut self, t_end: f64) -> Self {
        self.t_end = t_end;
        self.record_times.retain(|&t| t <= t_end);
        self
    }

    pub fn with_record_times(mut self, times: Vec<f64>) -> Self {
        self.record_times = times;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid(format!("time step must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(Error::invalid(format!("end time must be non-negative, got {}", self.t_end)));
        }
        if self.t_end > 0.0 && self.dt > self.t_end {
            return Err(Error::invalid(format!(
                "time step {} exceeds the horizon {}",
                self.dt, self.t_end
            )));
        }
        if self.record_times.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::invalid("record times must be sorted"));
        }
        if let Some(t) = self.record_times.iter().find(|&&t| !(0.0..=self.t_end).contains(&t)) {
            return Err(Error::invalid(format!("record time {t} outside [0, {}]", self.t_end)));
        }
        if self.loss.is_entropic() {
            self.params.validate()?;
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        if self.t_end == 0.0 {
            0
        } else {
            ((self.t_end / self.dt).round() as usize).max(1)
        }
    }

    fn step_of(&self, t: f64) -> usize {
        ((t / self.dt).round() as usize).min(self.n_steps())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowFrame {
    /// Requested time.
    pub time: f64,
    /// Time of the Euler step actually recorded.
    pub step_time: f64,
    pub step: usize,
    /// `N×D`, row-major.
    pub positions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory {
    pub dim: usize,
    pub frames: Vec<FlowFrame>,
    /// `(time, loss)` at every Euler step reached.
    pub loss_curve: Vec<(f64, f64)>,
}

impl FlowTrajectory {
    pub fn final_frame(&self) -> Option<&FlowFrame> {
        self.frames.last()
    }
}

/// Integrates the flow of `alpha0` towards `beta`. Only positions move, so
/// `alpha0` must carry equal weights.
///
/// A failure at some step returns [`Error::FlowInterrupted`] holding the
/// frames and loss values recorded up to that step.
pub fn run_flow(alpha0: &DiscreteMeasure, beta: &DiscreteMeasure, config: &FlowConfig) -> Result<FlowTrajectory> {
    config.validate()?;
    if !alpha0.has_equal_weights() {
        return Err(Error::invalid("the flowing measure must have equal weights"));
    }
    if alpha0.dim() != beta.dim() {
        return Err(Error::invalid(format!(
            "measures live in dimensions {} and {}",
            alpha0.dim(),
            beta.dim()
        )));
    }

    let n_steps = config.n_steps();
    let record_steps: Vec<usize> = config.record_times.iter().map(|&t| config.step_of(t)).collect();
    let speed = config.dt * alpha0.len() as f64;
    let mut traj = FlowTrajectory {
        dim: alpha0.dim(),
        frames: Vec::with_capacity(record_steps.len()),
        loss_curve: Vec::with_capacity(n_steps + 1),
    };
    let mut warm = WarmStart::default();
    let mut alpha = alpha0.clone();

    for step in 0..=n_steps {
        let t = step as f64 * config.dt;
        for (k, _) in record_steps.iter().enumerate().filter(|(_, &s)| s == step) {
            traj.frames.push(FlowFrame {
                time: config.record_times[k],
                step_time: t,
                step,
                positions: alpha.positions().to_vec(),
            });
        }
        let want_grad = step < n_steps;
        let (value, grad) = match evaluate(config.loss, &alpha, beta, &config.params, &mut warm, want_grad) {
            Ok(r) => r,
            Err(e) => return Err(interrupted(t, traj, e)),
        };
        traj.loss_curve.push((t, value.value));
        let Some(grad) = grad else { break };
        let next: Vec<f64> = alpha
            .positions()
            .iter()
            .zip(&grad.d_positions)
            .map(|(x, g)| x - speed * g)
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            let e = Error::NumericalFailure("particle positions became non-finite".into());
            return Err(interrupted(t, traj, e));
        }
        alpha = alpha.with_positions(next)?;
    }
    Ok(traj)
}

fn interrupted(time: f64, partial: FlowTrajectory, source: Error) -> Error {
    Error::FlowInterrupted {
        time,
        partial: Box::new(partial),
        source: Box::new(source),
    }
}

/// Writes one CSV per frame (`t,x1,…,xD` per particle) and `manifest.json`
/// into `dir`, returning the manifest path.
pub fn write_trajectory(traj: &FlowTrajectory, config: &FlowConfig, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let d = traj.dim;
    let mut frames = Vec::with_capacity(traj.frames.len());
    for (k, frame) in traj.frames.iter().enumerate() {
        let name = format!("frame_{k:03}.csv");
        let mut w = csv::Writer::from_path(dir.join(&name)).map_err(csv_err)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|c| format!("x{c}")));
        w.write_record(&header).map_err(csv_err)?;
        for p in frame.positions.chunks_exact(d) {
            let mut row = vec![format!("{:?}", frame.step_time)];
            row.extend(p.iter().map(|v| format!("{v:?}")));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        frames.push(json!({
            "time": frame.time,
            "step_time": frame.step_time,
            "step": frame.step,
            "file": name,
        }));
    }
    let mut cfg = json!({
        "loss": config.loss.name(),
        "dt": config.dt,
        "t_end": config.t_end,
        "record_times": config.record_times,
        "seed": config.seed,
        "frame_timing": "nearest Euler step",
    });
    if let Loss::Mmd(k) = config.loss {
        cfg["sigma"] = json!(k.sigma());
    } else {
        cfg["eps"] = json!(config.params.epsilon());
        cfg["p"] = json!(config.params.cost.p());
        cfg["tol"] = json!(config.params.tol);
        cfg["max_iters"] = json!(config.params.max_iters);
    }
    let manifest = json!({
        "config": cfg,
        "frames": frames,
        "loss_curve": traj.loss_curve,
    });
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::FormatError(e.to_string()))?;
    fs::write(&path, text + "\n")?;
    Ok(path)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::FormatError(format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{CostSpec, MmdKernelSpec};

    fn params(p: f64, eps: f64) -> SolverParams {
        SolverParams::new(CostSpec::new(p, eps).unwrap()).with_tol(1e-10)
    }

    fn dirac(x: f64) -> DiscreteMeasure {
        DiscreteMeasure::from_flat(&[1.0], &[x], 1).unwrap()
    }

    #[test]
    fn zero_horizon_keeps_the_input() {
        let a = DiscreteMeasure::uniform(&[0.1, 0.2, 0.3], 1).unwrap();
        let cfg = FlowConfig::new(Loss::Sinkhorn, params(2.0, 0.1))
            .with_t_end(0.0)
            .with_record_times(vec![0.0]);
        let traj = run_flow(&a, &dirac(1.0), &cfg).unwrap();
        assert_eq!(traj.frames.len(), 1);
        assert_eq!(traj.frames[0].positions, a.positions());
        assert_eq!(traj.loss_curve.len(), 1);
    }

    #[test]
    fn dirac_flow_follows_exponential_decay() {
        let cfg = FlowConfig::new(Loss::Sinkhorn, params(2.0, 0.1))
            .with_dt(1e-3)
            .with_t_end(1.0)
            .with_record_times(vec![0.0, 0.5, 1.0]);
        let traj = run_flow(&dirac(0.0), &dirac(1.0), &cfg).unwrap();
        for f in &traj.frames {
            let exact = 1.0 - (-2.0 * f.time).exp();
            assert!((f.positions[0] - exact).abs() <= 5e-3, "{} vs {exact}", f.positions[0]);
        }
    }

    #[test]
    fn rejects_weighted_input_and_bad_config() {
        let a = DiscreteMeasure::from_flat(&[0.3, 0.7], &[0.0, 1.0], 1).unwrap();
        let cfg = FlowConfig::new(Loss::Sinkhorn, params(2.0, 0.1));
        assert!(matches!(run_flow(&a, &dirac(1.0), &cfg), Err(Error::InvalidInput(_))));
        let u = DiscreteMeasure::uniform(&[0.0, 1.0], 1).unwrap();
        let bad = cfg.clone().with_record_times(vec![1.0, 0.5]);
        assert!(matches!(run_flow(&u, &dirac(1.0), &bad), Err(Error::InvalidInput(_))));
        let bad = cfg.clone().with_dt(-1.0);
        assert!(matches!(run_flow(&u, &dirac(1.0), &bad), Err(Error::InvalidInput(_))));
        let bad = cfg.with_record_times(vec![6.0]);
        assert!(matches!(run_flow(&u, &dirac(1.0), &bad), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn failures_keep_the_partial_trajectory() {
        let a = DiscreteMeasure::uniform(&[0.0, 0.1, 0.2, 0.3], 1).unwrap();
        let b = DiscreteMeasure::uniform(&[0.7, 0.8, 0.9], 1).unwrap();
        let p = SolverParams::new(CostSpec::new(2.0, 0.001).unwrap())
            .with_tol(1e-12)
            .with_max_iters(2);
        let cfg = FlowConfig::new(Loss::Sinkhorn, p).with_t_end(1.0);
        match run_flow(&a, &b, &cfg) {
            Err(Error::FlowInterrupted { time, partial, source }) => {
                assert_eq!(time, 0.0);
                assert_eq!(partial.frames.len(), 1);
                assert!(matches!(*source, Error::GradientUnreliable { .. }));
            }
            other => panic!("expected an interrupted flow, got {other:?}"),
        }
    }

    #[test]
    fn mmd_and_sinkhorn_losses_decrease() {
        let a = DiscreteMeasure::uniform(&[0.0, 0.05, 0.1, 0.15, 0.2], 1).unwrap();
        let b = DiscreteMeasure::uniform(&[0.6, 0.7, 0.8, 0.9, 1.0], 1).unwrap();
        for loss in [Loss::Sinkhorn, Loss::Mmd(MmdKernelSpec::energy())] {
            let cfg = FlowConfig::new(loss, params(2.0, 0.05)).with_t_end(1.0);
            let traj = run_flow(&a, &b, &cfg).unwrap();
            for w in traj.loss_curve.windows(2) {
                assert!(w[1].1 <= w[0].1 + 1e-9, "{loss}: {:?}", w);
            }
        }
    }

    #[test]
    fn writes_frames_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let a = DiscreteMeasure::uniform(&[0.0, 0.2], 1).unwrap();
        let cfg = FlowConfig::new(Loss::OtEps, params(1.0, 0.1))
            .with_t_end(0.5)
            .with_seed(3);
        let traj = run_flow(&a, &dirac(1.0), &cfg).unwrap();
        let manifest = write_trajectory(&traj, &cfg, dir.path()).unwrap();
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(manifest).unwrap()).unwrap();
        assert_eq!(m["frames"].as_array().unwrap().len(), 3);
        assert_eq!(m["config"]["seed"], 3);
        let first = fs::read_to_string(dir.path().join("frame_000.csv")).unwrap();
        assert_eq!(first.lines().next().unwrap(), "t,x1");
        assert_eq!(first.lines().count(), 3);
    }
}
