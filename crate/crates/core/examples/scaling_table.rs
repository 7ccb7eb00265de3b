//! Prints the peak-train scaling table as CSV.
use sepfit::bench::{scaling_bench, write_scaling_csv, ScalingSpec};
use sepfit::optimizer::FitOptions;

fn main() {
    let spec = ScalingSpec::default();
    let table = scaling_bench(&spec, &FitOptions::default()).unwrap();
    write_scaling_csv(&mut std::io::stdout(), spec.seed, &table).unwrap();
    for r in &table.rows {
        println!(
            "# {} {:?} p_opt {:?} max_accepted {}",
            r.n, r.mode, r.p_opt, r.max_accepted_steps
        );
    }
}
