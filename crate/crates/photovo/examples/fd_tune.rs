//! Scratch harness: check the pinned gradcheck fixtures.
use photovo::fixtures::gradcheck_case;
use photovo::optimize::gradient_check;

fn main() {
    let trials: u64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(20);
    let mut worst = 0.0f64;
    let mut fails = 0;
    for trial in 0..trials {
        let case = gradcheck_case(trial).unwrap();
        let window = case.correction_window();
        let cfg = case.energy_config();
        let (rel, c, a, fd) = gradient_check(&window, &case.params, &cfg, 1e-5, 1e-8).unwrap();
        let min_fd = fd.iter().map(|f| f.abs()).fold(f64::INFINITY, f64::min);
        println!("trial {trial:3} {:?} {:5}d rel {rel:.3e} (c{c}: a {:.3e} fd {:.3e} abs {:.2e}) minfd {min_fd:.2e}", case.loss, case.params.len(), a[c], fd[c], (a[c]-fd[c]).abs());
        worst = worst.max(rel);
        if rel > 1e-4 { fails += 1; }
    }
    println!("WORST {worst:.3e}  FAILS {fails}");
}
