//! Writes a small synthetic treatment-effect dataset as CSV, suitable for
//! the `estimate` subcommand. Columns: x1, x2, d, y.
//!
//! Usage: `cargo run --example make_example_data -- [path] [n] [seed]`
//! (defaults: configs/example_data.csv, 300 rows, seed 5).

use std::env;
use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use catereg::simulation::{generate_model, ModelId};

fn main() {
    let mut args = env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "configs/example_data.csv".into());
    let n: usize = args.next().map(|s| s.parse().expect("n must be an integer")).unwrap_or(300);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed must be an integer")).unwrap_or(5);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (data, _oracle) = generate_model(ModelId::One, n, &mut rng).expect("sample generation");

    let mut out = String::from("x1,x2,d,y\n");
    for i in 0..data.n() {
        out.push_str(&format!(
            "{:.9e},{:.9e},{},{:.9e}\n",
            data.x()[(i, 0)],
            data.x()[(i, 1)],
            data.d()[i],
            data.y()[i]
        ));
    }
    fs::write(&path, out).expect("write CSV");
    println!("wrote {path} ({n} rows)");
}
