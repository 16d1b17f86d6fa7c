use ssep_mdp::lattice::{init_bernoulli_star, run_stirring_with, SimParams};
use ssep_mdp::rng::replica_rng;
use std::time::Instant;

fn main() {
    let p = SimParams::new(0.5, 500, 10_000.0, 0);
    let start = Instant::now();
    let mut events = 0;
    for r in 0..20 {
        let mut rng = replica_rng(1, r);
        let c = init_bernoulli_star(0.5, 500, &mut rng).unwrap();
        events += run_stirring_with(c, &p, &mut rng).unwrap().events;
    }
    let s = start.elapsed().as_secs_f64();
    println!("{events} events, {:.2} ns/event", s * 1e9 / events as f64);
}
