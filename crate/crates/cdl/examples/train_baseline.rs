//! Train a baseline network and report per-epoch loss and accuracy.
//!
//! Runs on a synthetic dataset out of the box; point `CDL_DATA_DIR` at the
//! IDX files to train on real data.
//!
//! ```text
//! cargo run --release --example train_baseline -- [table1|table2] [epochs] [learning_rate] [train_subset]
//! ```

use std::time::Instant;

use cdl::data::Dataset;
use cdl::network::{accuracy, build_network, train, NetworkSpec, TrainOptions};

fn main() -> cdl::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arch = args.first().map(String::as_str).unwrap_or("table2");
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let learning_rate: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let subset: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);

    let spec = match arch {
        "table1" => NetworkSpec::table1(),
        _ => NetworkSpec::table2(),
    };

    let (mut train_set, test_set) = match std::env::var_os("CDL_DATA_DIR") {
        Some(dir) => {
            let dir = std::path::PathBuf::from(dir);
            (Dataset::mnist_train(&dir)?, Dataset::mnist_test(&dir)?)
        }
        None => {
            println!("CDL_DATA_DIR not set; using the synthetic demo set");
            (Dataset::synthetic(10, 200, 28, 1), Dataset::synthetic(10, 40, 28, 2))
        }
    };
    train_set.truncate(subset);
    println!(
        "arch={arch} train={} test={} epochs={epochs} lr={learning_rate}",
        train_set.len(),
        test_set.len()
    );

    let mut net = build_network(&spec, 7)?;
    let t0 = Instant::now();
    train(
        &mut net,
        &train_set.images,
        &train_set.labels,
        &TrainOptions {
            epochs,
            batch_size: 50,
            learning_rate,
            seed: 7,
        },
    )?;
    for (epoch, loss) in net.meta.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  loss {loss:.6}", epoch + 1);
    }
    let train_acc = accuracy(&net, &train_set.images, &train_set.labels)?;
    let test_acc = accuracy(&net, &test_set.images, &test_set.labels)?;
    println!(
        "train_accuracy {:.4}  test_accuracy {:.4}  total {:.1?}",
        train_acc,
        test_acc,
        t0.elapsed()
    );
    Ok(())
}
