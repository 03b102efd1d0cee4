//! Linear probe and k-NN accuracy of a random and a briefly trained encoder.

use viewlab::dataset::{make_dataset, DatasetConfig};
use viewlab::eval::{self, ProbeConfig};
use viewlab::modelzoo::{zoo, Network};
use viewlab::trainer::{self, TrainConfig};
use viewlab::Result;

fn encoder() -> Result<Network> {
    zoo::toy_encoder([3, 32, 32], zoo::EncoderSpec::default(), 5)
}

pub fn run() -> Result<()> {
    let dcfg = DatasetConfig {
        train_per_class: 150,
        test_per_class: 50,
        ..DatasetConfig::default()
    };
    let (train, test) = make_dataset(&dcfg)?;
    let probe = ProbeConfig::default();
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::baseline()
    };
    let trained = trainer::pretrain(&cfg, encoder()?, &train, None, None)?.encoder;
    println!("chance {:.3}", 1.0 / dcfg.classes as f64);
    for (name, f) in [("random init", encoder()?), ("trained", trained)] {
        let acc = eval::linear_probe(&f, &train, &test, &probe)?;
        let knn = eval::knn_eval(&f, &train, &test, 5)?;
        println!("{name:>11}: probe {acc:.3}, 5-NN {knn:.3}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
