//! Synthetic corpus generator: taxonomy, workflow walk, rendering, QA, I/O.

use std::collections::BTreeSet;
use std::fs;

use pitvqa::data::io::{read_dataset, read_frame, write_dataset, write_frame, MANIFEST};
use pitvqa::data::qa::{expected_answer, generate_qa, template_bank, word_count};
use pitvqa::data::render::{render_clean, render_frame, FrameImage, PHASE_COLOURS, SLOT_ORIGINS, SLOT_SIZE};
use pitvqa::data::split::{split_by_procedure, split_procedures};
use pitvqa::data::taxonomy::{phase_of_step, steps_of_phase, Category, Taxonomy};
use pitvqa::data::vocab::{normalize, Vocabulary, PAD};
use pitvqa::data::workflow::{frame_stream, sample_procedure, FrameState};
use pitvqa::data::{generate, GenConfig, Split};
use pitvqa::Error;

#[test]
fn taxonomy_has_the_published_cardinalities() {
    let tax = Taxonomy::build();
    let sizes: Vec<usize> = [
        Category::Phase,
        Category::Step,
        Category::Instrument,
        Category::Quantity,
        Category::Position,
        Category::OperationNote,
    ]
    .iter()
    .map(|&c| tax.size(c))
    .collect();
    assert_eq!(sizes, vec![4, 15, 18, 3, 5, 14]);
    assert_eq!(tax.len(), 59);
    let mut seen = BTreeSet::new();
    for class in 0..59 {
        let (cat, name) = tax.entry(class).unwrap();
        assert_eq!(tax.class_of(cat, name), Some(class));
        assert!(seen.insert((cat, name)));
    }
    assert!(tax.entry(59).is_err());
}

#[test]
fn workflow_walk_is_legal_and_seeded() {
    let states = sample_procedure(3, 0, 10_000);
    for s in &states {
        assert_eq!(phase_of_step(s.step), s.phase);
        assert!(steps_of_phase(s.phase).contains(&s.step));
        assert_eq!(s.quantity(), s.instruments.len());
        let pos: BTreeSet<usize> = s.instruments.iter().map(|p| p.1).collect();
        assert_eq!(pos.len(), s.instruments.len());
        assert!(pos.iter().all(|&p| p < 5));
        assert!(s.quantity() <= 2);
    }
    for w in states.windows(2) {
        assert!(w[1].step >= w[0].step);
    }
    let phases: BTreeSet<usize> = states.iter().map(|s| s.phase).collect();
    let steps: BTreeSet<usize> = states.iter().map(|s| s.step).collect();
    assert_eq!(phases.len(), 4);
    assert!(steps.len() >= 14, "{}", steps.len());
    assert_eq!(states, sample_procedure(3, 0, 10_000));
    assert_ne!(states, sample_procedure(4, 0, 10_000));
}

fn state(phase: usize, instruments: Vec<(usize, usize)>) -> FrameState {
    FrameState {
        procedure_id: 0,
        frame_index: 0,
        phase,
        step: steps_of_phase(phase).start,
        instruments,
        note: 2,
    }
}

fn hue_distance(a: &FrameImage, b: &FrameImage) -> f64 {
    let (ma, mb) = (a.channel_means(), b.channel_means());
    ma.iter().zip(mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn rendering_encodes_phase_and_is_seeded() {
    for p in 0..4 {
        for q in p + 1..4 {
            // same step glyph on both so only the phase differs
            let a = FrameState { step: 0, ..state(p, vec![]) };
            let b = FrameState { step: 0, ..state(q, vec![]) };
            let d = hue_distance(&render_frame(&a, 1), &render_frame(&b, 1));
            assert!(d > 0.1, "phases {p},{q}: {d}");
        }
    }
    let s = state(2, vec![(4, 1), (9, 3)]);
    assert_eq!(render_frame(&s, 5), render_frame(&s, 5));
    assert_ne!(render_frame(&s, 5), render_frame(&s, 6));
    let img = render_frame(&s, 5);
    assert!(img.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn empty_frames_draw_no_glyphs() {
    for phase in 0..4 {
        let img = render_clean(&state(phase, vec![]));
        let bg = PHASE_COLOURS[phase];
        for &(sy, sx) in &SLOT_ORIGINS {
            for c in 0..3 {
                for y in sy..sy + SLOT_SIZE {
                    for x in sx..sx + SLOT_SIZE {
                        assert_eq!(img.pixels[(c * 64 + y) * 64 + x], bg[c]);
                    }
                }
            }
        }
        // with noise every slot pixel stays within 6σ of the background
        let noisy = render_frame(&state(phase, vec![]), 9);
        for &(sy, sx) in &SLOT_ORIGINS {
            for y in sy..sy + SLOT_SIZE {
                for x in sx..sx + SLOT_SIZE {
                    let i = y * 64 + x;
                    assert!((noisy.pixels[i] - bg[0]).abs() <= 0.3);
                }
            }
        }
    }
    let with = render_clean(&state(0, vec![(0, 2)]));
    let without = render_clean(&state(0, vec![]));
    assert_ne!(with, without);
}

#[test]
fn qa_pairs_agree_with_state_and_length_bounds() {
    let tax = Taxonomy::build();
    let mut total = 0usize;
    let mut frames = 0usize;
    for pid in 0..25u32 {
        for s in sample_procedure(11, pid, 400) {
            let mut rng = frame_stream(11, pid, s.frame_index).split("qa");
            let qa = generate_qa(&s, &tax, &mut rng);
            assert!((6..=10).contains(&qa.len()));
            for q in &qa {
                let n = word_count(&q.question);
                assert!((7..=12).contains(&n), "{:?}", q.question);
                assert_eq!(expected_answer(&q.question, &s, &tax), Some(q.answer));
                assert_eq!(tax.category_of(q.answer).unwrap(), q.category);
            }
            total += qa.len();
            frames += 1;
        }
    }
    let mean = total as f64 / frames as f64;
    assert!((7.5..=8.5).contains(&mean), "{mean}");
}

#[test]
fn vocabulary_examples() {
    let empty = Vocabulary::build::<&str>(&[]);
    assert_eq!(empty.len(), 2);
    let once = Vocabulary::build(&["where is the drill", "what phase is it"]);
    let twice = Vocabulary::build(&[
        "where is the drill",
        "what phase is it",
        "where is the drill",
    ]);
    assert_eq!(once, twice);
    let bank = template_bank();
    let distinct: BTreeSet<String> = bank.iter().flat_map(|q| normalize(q)).collect();
    let full = Vocabulary::from_template_bank();
    assert_eq!(full.len(), distinct.len() + 2);
    let sorted: Vec<&str> = (2..full.len()).map(|i| full.token(i).unwrap()).collect();
    assert!(sorted.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn tokenizer_examples() {
    let v = Vocabulary::from_template_bank();
    let (ids, mask) = v.tokenize("What is the surgical phase of the image?", 16);
    assert_eq!(mask.iter().filter(|&&m| m).count(), 8);
    assert!(mask[..8].iter().all(|&m| m) && mask[8..].iter().all(|&m| !m));
    assert!(ids[8..].iter().all(|&i| i == PAD));
    let (ids, mask) = v.tokenize("", 16);
    assert!(ids.iter().all(|&i| i == PAD) && mask.iter().all(|&m| !m));
    for q in template_bank().iter().take(50) {
        let (ids, mask) = v.tokenize(q, 16);
        assert_eq!(v.detokenize(&ids, &mask), normalize(q).join(" "));
    }
}

fn small() -> GenConfig {
    GenConfig {
        seed: 2,
        procedures: 5,
        frames_per_procedure: 4,
        train_fraction: 0.8,
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate(&small()).unwrap();
    write_dataset(dir.path(), &g.corpus).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, g.corpus);
}

#[test]
fn truncated_frames_and_bad_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate(&small()).unwrap();
    let path = dir.path().join("one.bin");
    write_frame(&path, &g.corpus.frames[0].image).unwrap();
    assert_eq!(read_frame(&path).unwrap(), g.corpus.frames[0].image);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    match read_frame(&path) {
        Err(e @ Error::Io { .. }) => assert!(e.to_string().contains("one.bin"), "{e}"),
        other => panic!("expected an IO error, got {other:?}"),
    }

    write_dataset(dir.path(), &g.corpus).unwrap();
    let manifest = dir.path().join(MANIFEST);
    let text = fs::read_to_string(&manifest).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[2] = lines[2].replacen("\"category\":\"", "\"category\":\"bogus_", 1);
    fs::write(&manifest, lines.join("\n") + "\n").unwrap();
    match read_dataset(dir.path()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    fs::remove_file(dir.path().join(&g.corpus.frames[0].path)).unwrap();
    fs::write(&manifest, text).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn procedure_split_partitions_and_is_seeded() {
    let ids: Vec<u32> = (0..25).collect();
    let (train, val) = split_procedures(&ids, 0.8, 4).unwrap();
    assert_eq!((train.len(), val.len()), (20, 5));
    let all: BTreeSet<u32> = train.iter().chain(&val).copied().collect();
    assert_eq!(all.len(), 25);
    assert_eq!(split_procedures(&ids, 0.8, 4).unwrap(), (train, val));
    assert!(split_procedures(&[3, 3], 0.5, 0).is_err());

    let g = generate(&GenConfig { procedures: 6, ..small() }).unwrap();
    let (a, b) = split_by_procedure(&g.corpus, 0.5, 1).unwrap();
    let pa: BTreeSet<u32> = a.iter().map(|&i| g.corpus.samples[i].procedure_id).collect();
    let pb: BTreeSet<u32> = b.iter().map(|&i| g.corpus.samples[i].procedure_id).collect();
    assert!(pa.is_disjoint(&pb));
    let fa: BTreeSet<usize> = a.iter().map(|&i| g.corpus.samples[i].frame).collect();
    assert!(b.iter().all(|&i| !fa.contains(&g.corpus.samples[i].frame)));
    // the generator's own split tags agree with a procedure-level partition
    let train_p: BTreeSet<u32> = g.corpus.indices(Split::Train).iter().map(|&i| g.corpus.samples[i].procedure_id).collect();
    let val_p: BTreeSet<u32> = g.corpus.indices(Split::Val).iter().map(|&i| g.corpus.samples[i].procedure_id).collect();
    assert!(train_p.is_disjoint(&val_p));
}

#[test]
fn phase_is_recoverable_from_mean_colour() {
    let g = generate(&GenConfig {
        seed: 8,
        procedures: 10,
        frames_per_procedure: 60,
        train_fraction: 0.5,
    })
    .unwrap();
    let means: Vec<[f64; 3]> = g.corpus.frames.iter().map(|f| f.image.channel_means()).collect();
    let fit: Vec<usize> = (0..means.len()).filter(|&i| g.states[i].procedure_id < 5).collect();
    let test: Vec<usize> = (0..means.len()).filter(|&i| g.states[i].procedure_id >= 5).collect();
    let mut centroid = [[0.0; 3]; 4];
    let mut count = [0usize; 4];
    for &i in &fit {
        let p = g.states[i].phase;
        count[p] += 1;
        for c in 0..3 {
            centroid[p][c] += means[i][c];
        }
    }
    for p in 0..4 {
        assert!(count[p] > 0);
        for c in 0..3 {
            centroid[p][c] /= count[p] as f64;
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let dist = |p: usize| (0..3).map(|c| (means[i][c] - centroid[p][c]).powi(2)).sum::<f64>();
            let best = (0..4).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
            best == g.states[i].phase
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.9, "{acc}");
}
