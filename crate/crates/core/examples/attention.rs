//! Multi-head attention with causal and padding masks; prints the weight
//! matrix of one head and checks its rows.

use pitvqa::attention::{attention_specs, multi_head_attention_weights, AttentionParams, MaskSpec};
use pitvqa::params::ParamStore;
use pitvqa::{Result, RngStream, Tape, Tensor};

fn main() -> Result<()> {
    let (d, heads, l) = (8, 2, 5);
    let store = ParamStore::from_specs(&attention_specs("att", d), 3);
    let mut rng = RngStream::new(1);
    let x = Tensor::from_fn([1, l, d], |_| rng.normal());

    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let p = AttentionParams::bind(&bound, "att", heads)?;
    let xv = tape.constant(x);
    // last position is padding
    let keep = vec![true, true, true, true, false];
    let (out, weights) =
        multi_head_attention_weights(&mut tape, xv, xv, &p, &MaskSpec::CausalPadding(keep))?;

    let w = tape.value(weights);
    println!(
        "output shape {:?}, weight shape {:?}",
        tape.value(out).shape(),
        w.shape()
    );
    println!("head 0 weights (query rows, key columns):");
    for i in 0..l {
        let row: Vec<f64> = (0..l).map(|j| w.at(&[0, 0, i, j])).collect();
        let text: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!(
            "  [{}]  sum {:.12}",
            text.join(" "),
            row.iter().sum::<f64>()
        );
    }
    Ok(())
}
