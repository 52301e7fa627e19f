//! Confusion-matrix metrics on the worked example and a majority-class
//! baseline on imbalanced labels.

use pitvqa::metrics::{confusion_matrix, majority_baseline, MetricsReport};
use pitvqa::Result;

fn main() -> Result<()> {
    let y = [0, 0, 0, 1];
    let y_hat = [0, 0, 1, 1];
    println!("confusion {:?}", confusion_matrix(&y, &y_hat, 2)?);
    let r = MetricsReport::from_predictions(&y, &y_hat, 2)?;
    println!(
        "accuracy {:.4}  balanced accuracy {:.4}  macro F {:.4}",
        r.accuracy, r.balanced_accuracy, r.macro_fscore
    );

    let train: Vec<usize> = (0..100).map(|i| if i < 70 { 2 } else { i % 5 }).collect();
    let eval: Vec<usize> = (0..50).map(|i| i % 5).collect();
    let base = majority_baseline(&train, &eval, 5)?;
    println!(
        "majority baseline: accuracy {:.3}, balanced accuracy {:.3} (chance 1/5)",
        base.accuracy, base.balanced_accuracy
    );
    Ok(())
}
