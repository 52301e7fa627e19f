//! Runs one image/question pair through every stage of a freshly
//! initialised desk-profile model.

use pitvqa::data::taxonomy::Taxonomy;
use pitvqa::data::vocab::Vocabulary;
use pitvqa::data::{generate, GenConfig};
use pitvqa::model::{ModelConfig, PitVqaNet};
use pitvqa::{Result, RngStream};

fn main() -> Result<()> {
    let cfg = ModelConfig::desk();
    let net = PitVqaNet::new(cfg.clone())?;
    println!("desk profile: {} parameters", cfg.parameter_count());

    let g = generate(&GenConfig {
        procedures: 1,
        frames_per_procedure: 2,
        ..GenConfig::default()
    })?;
    let sample = &g.corpus.samples[0];
    let image = g.corpus.frames[sample.frame].image.to_tensor();
    let (ids, pad) =
        Vocabulary::from_template_bank().tokenize(&sample.question, cfg.max_question_len);

    let img = net.encode_image(&image)?;
    let txt = net.encode_grounded_text(&ids, &pad, &img)?;
    let dec = net.decode(&txt)?;
    let eb = net.excitation_block(&dec, false)?;
    let logits = net.classify(&eb, false, &mut RngStream::new(0))?;
    println!(
        "image features {:?} -> grounded text {:?} -> decoder {:?} -> EB {:?} -> logits {:?}",
        img.shape(),
        txt.shape(),
        dec.shape(),
        eb.shape(),
        logits.shape()
    );

    let probs = net.forward(&image, &ids, &pad)?;
    let mut ranked: Vec<(usize, f64)> = probs.data().iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    let tax = Taxonomy::build();
    println!("question: {}", sample.question);
    for (c, p) in ranked.iter().take(5) {
        println!("  {:<24} {p:.4}", tax.entry(*c)?.1);
    }
    println!("probability mass {:.12}", probs.data().iter().sum::<f64>());
    Ok(())
}
