//! Templated question-answer generation from frame states.

use serde::{Deserialize, Serialize};

use super::taxonomy::{Category, Taxonomy, INSTRUMENTS, PHASES, POSITIONS, STEPS};
use super::workflow::FrameState;
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuestionKind {
    Phase,
    NextPhase,
    Step,
    NextStep,
    Quantity,
    Note,
    /// Which instrument occupies a position slot.
    InstrumentAt,
    /// Where a present instrument is.
    PositionOf,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 8] = [
        QuestionKind::Phase,
        QuestionKind::NextPhase,
        QuestionKind::Step,
        QuestionKind::NextStep,
        QuestionKind::Quantity,
        QuestionKind::Note,
        QuestionKind::InstrumentAt,
        QuestionKind::PositionOf,
    ];

    pub fn category(self) -> Category {
        match self {
            QuestionKind::Phase | QuestionKind::NextPhase => Category::Phase,
            QuestionKind::Step | QuestionKind::NextStep => Category::Step,
            QuestionKind::Quantity => Category::Quantity,
            QuestionKind::Note => Category::OperationNote,
            QuestionKind::InstrumentAt => Category::Instrument,
            QuestionKind::PositionOf => Category::Position,
        }
    }

    /// Two phrasings per kind; `{}` is the slot.
    pub fn templates(self) -> [&'static str; 2] {
        match self {
            QuestionKind::Phase => [
                "What is the surgical phase of the image?",
                "Which surgical phase is shown in this image?",
            ],
            QuestionKind::NextPhase => [
                "What is the next surgical phase after this image?",
                "Which phase of surgery will follow the current phase?",
            ],
            QuestionKind::Step => [
                "What is the surgical step shown in the image?",
                "Which step of the procedure is being performed now?",
            ],
            QuestionKind::NextStep => [
                "What is the next surgical step after the current step?",
                "Which step of the procedure will be performed next?",
            ],
            QuestionKind::Quantity => [
                "How many instruments are present in the image?",
                "What is the number of instruments in this frame?",
            ],
            QuestionKind::Note => [
                "What is the operation note for this surgical image?",
                "Which operation note describes the current surgical frame?",
            ],
            QuestionKind::InstrumentAt => [
                "What instrument is located at the {} of the image?",
                "Which instrument can be seen at the {} of the frame?",
            ],
            QuestionKind::PositionOf => [
                "Where is the {} located in the image?",
                "In which part of the image is the {}?",
            ],
        }
    }

    /// Slot fillers for templated kinds; empty for fixed questions.
    pub fn fillers(self) -> &'static [&'static str] {
        match self {
            QuestionKind::InstrumentAt => &POSITIONS,
            QuestionKind::PositionOf => &INSTRUMENTS,
            _ => &[],
        }
    }
}

/// One question about one frame, before tokenisation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: usize,
    pub category: Category,
}

fn fill(template: &str, slot: &str) -> String {
    template.replacen("{}", slot, 1)
}

/// Every concrete question string the generator can emit.
pub fn template_bank() -> Vec<String> {
    let mut out = Vec::new();
    for kind in QuestionKind::ALL {
        for t in kind.templates() {
            if kind.fillers().is_empty() {
                out.push(t.to_string());
            } else {
                out.extend(kind.fillers().iter().map(|f| fill(t, f)));
            }
        }
    }
    out
}

pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Six fixed questions plus two per present instrument (6–10 per frame).
pub fn generate_qa(state: &FrameState, tax: &Taxonomy, rng: &mut RngStream) -> Vec<QaPair> {
    let mut out = Vec::with_capacity(6 + 2 * state.instruments.len());
    let mut ask = |kind: QuestionKind, slot: Option<&str>, local: usize, rng: &mut RngStream| {
        let t = kind.templates()[rng.below(2)];
        let question = match slot {
            Some(s) => fill(t, s),
            None => t.to_string(),
        };
        let category = kind.category();
        out.push(QaPair {
            question,
            answer: tax.global(category, local),
            category,
        });
    };
    ask(QuestionKind::Phase, None, state.phase, rng);
    ask(
        QuestionKind::NextPhase,
        None,
        (state.phase + 1).min(PHASES.len() - 1),
        rng,
    );
    ask(QuestionKind::Step, None, state.step, rng);
    ask(
        QuestionKind::NextStep,
        None,
        (state.step + 1).min(STEPS.len() - 1),
        rng,
    );
    ask(QuestionKind::Quantity, None, state.quantity(), rng);
    ask(QuestionKind::Note, None, state.note, rng);
    for &(inst, pos) in &state.instruments {
        ask(QuestionKind::InstrumentAt, Some(POSITIONS[pos]), inst, rng);
        ask(QuestionKind::PositionOf, Some(INSTRUMENTS[inst]), pos, rng);
    }
    out
}

/// Re-derives the answer to `question` from `state` by matching it against
/// the template bank. `None` when the question is not a known template or
/// asks about an absent instrument or empty slot.
pub fn expected_answer(question: &str, state: &FrameState, tax: &Taxonomy) -> Option<usize> {
    for kind in QuestionKind::ALL {
        for t in kind.templates() {
            let slot = if kind.fillers().is_empty() {
                (t == question).then_some(None)
            } else {
                kind.fillers()
                    .iter()
                    .position(|f| fill(t, f) == question)
                    .map(Some)
            };
            let Some(slot) = slot else { continue };
            let cat = kind.category();
            let local = match (kind, slot) {
                (QuestionKind::Phase, _) => state.phase,
                (QuestionKind::NextPhase, _) => (state.phase + 1).min(PHASES.len() - 1),
                (QuestionKind::Step, _) => state.step,
                (QuestionKind::NextStep, _) => (state.step + 1).min(STEPS.len() - 1),
                (QuestionKind::Quantity, _) => state.quantity(),
                (QuestionKind::Note, _) => state.note,
                (QuestionKind::InstrumentAt, Some(pos)) => {
                    state.instruments.iter().find(|(_, p)| *p == pos)?.0
                }
                (QuestionKind::PositionOf, Some(inst)) => {
                    state.instruments.iter().find(|(i, _)| *i == inst)?.1
                }
                _ => return None,
            };
            return Some(tax.global(cat, local));
        }
    }
    None
}
