use cglq_core::cgle::{self, CgleParams, StepScheme};
use cglq_core::correl::{correlation_trace, DenominatorMode};
use cglq_core::grid::{Field, Spectral, TimeGrid};
use cglq_core::quantum::NoiseSettings;
use cglq_core::states::{self, BoundStateSpec};
use cglq_core::C64;

fn fig2_params() -> CgleParams {
    CgleParams { dispersion: 1.0, delta: -0.01, epsilon: 1.8, beta: 0.5, mu: -0.05, nu: 0.0 }
}

fn load_u0(grid: &std::sync::Arc<TimeGrid>) -> Field {
    let bytes = std::fs::read("/tmp/u0_relaxed_1024_40.bin").unwrap();
    let vals: Vec<C64> = bytes.chunks_exact(16).map(|c| {
        C64::new(f64::from_le_bytes(c[0..8].try_into().unwrap()),
                 f64::from_le_bytes(c[8..16].try_into().unwrap()))
    }).collect();
    Field::new(grid.clone(), vals).unwrap()
}

#[test]
#[ignore]
fn scratch_train_sep_sweep() {
    let grid = TimeGrid::new(1024, 40.0).unwrap();
    let u0 = load_u0(&grid);
    let params = fig2_params();
    let scheme = StepScheme { dz: 1e-3, substeps: 1 };
    for sep in [3.0_f64, 4.0] {
        let t0 = std::time::Instant::now();
        let spec = BoundStateSpec::train(4, sep).unwrap();
        let mut train = states::compose_bound_state(&u0, &spec).unwrap();
        train = cgle::propagate(&train, &params, 60.0, &scheme).unwrap().field;
        let seg = states::detect_solitons(&train, 0.3).unwrap();
        if seg.n_solitons() != 4 { println!("sep {sep}: broke ({} peaks)", seg.n_solitons()); continue; }
        let seps: Vec<String> = seg.peak_positions.windows(2).map(|w| format!("{:.3}", w[1]-w[0])).collect();
        println!("sep {sep}: settled seps=[{}]", seps.join(","));
        let mean_pos: f64 = seg.peak_positions.iter().sum::<f64>() / 4.0;
        let mut vals = train.values().to_vec();
        Spectral::new(grid.clone()).shift(&mut vals, mean_pos);
        let train2 = Field::new(grid.clone(), vals).unwrap();
        let snaps: Vec<usize> = [0.0_f64, 2.0, 4.0, 8.0, 12.0, 16.0, 20.0].iter().map(|z| (z/1e-3).round() as usize).collect();
        let (_, traj) = cgle::propagate_recording(&train2, &params, 20.0, &scheme, &snaps).unwrap();
        match correlation_trace(&traj, &params, &NoiseSettings::default(), &snaps, 4, 0.3, DenominatorMode::Full) {
            Ok(trace) => {
                println!("  pairs {:?}", trace.pairs);
                for (z, row) in trace.z_values.iter().zip(&trace.values) {
                    let s: Vec<String> = row.iter().map(|v| format!("{:+.4}", v)).collect();
                    println!("  z={:5.1}  {}", z, s.join(" "));
                }
            }
            Err(e) => println!("  trace failed: {e}"),
        }
        println!("  [{:?}]", t0.elapsed());
    }
}
