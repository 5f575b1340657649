//! Flows from a uniform sample of [0, 0.2] towards one of [0.6, 1] under
//! OT_ε, the Sinkhorn divergence and the energy distance.
//!
//! ```text
//! cargo run --release --example segment_flows -- [N] [OUT_DIR]
//! ```
//!
//! Each loss gets its own sub-directory of frames plus a manifest.

use std::path::PathBuf;

use sinkdiv::flow::{run_flow, write_trajectory, FlowConfig};
use sinkdiv::measure::sample_uniform_interval;
use sinkdiv::{CostSpec, Loss, MmdKernelSpec, SolverParams};

fn main() -> sinkdiv::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(Ok(500), |s| s.parse()).expect("N must be an integer");
    let out = PathBuf::from(args.next().unwrap_or_else(|| "segment_flows".into()));

    let source = sample_uniform_interval(n, 0.0, 0.2, 10)?;
    let target = sample_uniform_interval(n, 0.6, 1.0, 11)?;
    std::fs::create_dir_all(&out)?;
    source.save(out.join("source.csv"))?;
    target.save(out.join("target.csv"))?;

    let params = SolverParams::new(CostSpec::new(1.0, 0.1)?);
    for loss in [Loss::OtEps, Loss::Sinkhorn, Loss::Mmd(MmdKernelSpec::energy())] {
        let config = FlowConfig::new(loss, params).with_seed(10);
        let traj = run_flow(&source, &target, &config)?;
        let manifest = write_trajectory(&traj, &config, &out.join(loss.name()))?;
        let last = traj.final_frame().expect("at least one frame");
        let (lo, hi) = last
            .positions
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        println!(
            "{:<11} t = {:.2}: particles span [{lo:.3}, {hi:.3}], manifest {}",
            loss.name(),
            last.time,
            manifest.display()
        );
    }
    Ok(())
}
