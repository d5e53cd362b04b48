use mrio::config::PipelineConfig;
use mrio::pipeline::{run_pipeline, RadarSelection};
use mrio::sim::{synthesize_dataset, Scenario, SimConfig, SimSeed, TrajectoryModel};

fn main() {
    let scenario = Scenario {
        model: TrajectoryModel::Line { speed: 1.0 },
        hold: 3.0, ramp: 0.3, motion_duration: 20.0, ramp_down: 0.3,
    };
    let sim = SimConfig::noise_free(scenario, 200.0);
    let (dataset, truth) = synthesize_dataset(&sim, SimSeed(1));
    for (name, lag, iters, tol) in [
        ("lag5 it10 tol1e-6", 5.0, 10usize, 1e-6),
        ("lag5 it10 tol1e-10", 5.0, 10, 1e-10),
        ("lag5 it30 tol1e-12", 5.0, 30, 1e-12),
        ("batch it30 tol1e-12", 1e9, 30, 1e-12),
    ] {
        let mut config = PipelineConfig::default();
        config.smoother.lag = lag;
        config.smoother.max_iterations = iters;
        config.smoother.relative_cost_tolerance = tol;
        let t0 = std::time::Instant::now();
        let (traj, _) = run_pipeline(&dataset, &config, &RadarSelection::All).unwrap();
        let est_end = traj.records.last().unwrap();
        let gt_end = truth.records.iter().min_by(|a, b| (a.timestamp - est_end.timestamp).abs().total_cmp(&(b.timestamp - est_end.timestamp).abs())).unwrap();
        println!("{name}: final err {:.5} m, wall {:.2}s", (est_end.position - gt_end.position).norm(), t0.elapsed().as_secs_f64());
    }
}
