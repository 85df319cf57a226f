//! Deterministic generator of flight-query sentences with departure,
//! arrival, date and time slots in IOB form.
//!
//! Some templates put a city first and only reveal its role afterwards
//! ("boston departures to denver" vs "boston arrivals from denver"), so a
//! left-to-right tagger cannot label them from the prefix alone.

use crate::corpus::{RawCorpus, TaggedSentence};
use crate::math::Rng;

const CITIES: &[&str] = &[
    "boston",
    "denver",
    "dallas",
    "atlanta",
    "seattle",
    "chicago",
    "pittsburgh",
    "baltimore",
    "oakland",
    "miami",
    "new york",
    "san francisco",
    "los angeles",
];
const WEEKDAYS: &[&str] = &[
    "monday",
    "tuesday",
    "wednesday",
    "thursday",
    "friday",
    "saturday",
    "sunday",
];
const MONTHS: &[&str] = &["june", "july"];
const NUMBERS: &[&str] = &["1", "2", "3", "4", "5"];
const PERIODS: &[&str] = &["morning", "afternoon", "evening"];
const FILLERS: &[&str] = &["please", "uh", "um", "okay"];

/// The nine labels the generator can emit.
pub const LABELS: [&str; 9] = [
    "O", "B-dept", "I-dept", "B-arr", "I-arr", "B-date", "I-date", "B-time", "I-time",
];

#[derive(Default)]
struct Builder {
    words: Vec<String>,
    labels: Vec<String>,
}

impl Builder {
    fn plain(&mut self, text: &str) {
        for w in text.split_whitespace() {
            self.words.push(w.to_string());
            self.labels.push("O".to_string());
        }
    }

    fn slot(&mut self, text: &str, kind: &str) {
        for (i, w) in text.split_whitespace().enumerate() {
            self.words.push(w.to_string());
            self.labels
                .push(format!("{}-{kind}", if i == 0 { "B" } else { "I" }));
        }
    }

    fn finish(self) -> TaggedSentence {
        TaggedSentence {
            words: self.words,
            labels: self.labels,
        }
    }
}

fn pick<'a>(rng: &mut Rng, items: &[&'a str]) -> &'a str {
    items[rng.below(items.len())]
}

fn date(b: &mut Builder, rng: &mut Rng) {
    match rng.below(4) {
        0 => {
            b.plain("on");
            b.slot(pick(rng, WEEKDAYS), "date");
        }
        1 => {
            b.plain("on");
            let d = format!("next {}", pick(rng, WEEKDAYS));
            b.slot(&d, "date");
        }
        2 => b.slot(if rng.below(2) == 0 { "today" } else { "tomorrow" }, "date"),
        _ => {
            b.plain("on");
            let d = format!("{} {}", pick(rng, MONTHS), pick(rng, NUMBERS));
            b.slot(&d, "date");
        }
    }
}

fn time(b: &mut Builder, rng: &mut Rng) {
    match rng.below(3) {
        0 => {
            b.plain("in the");
            b.slot(pick(rng, PERIODS), "time");
        }
        1 => {
            b.plain("at");
            let t = format!(
                "{} {}",
                pick(rng, NUMBERS),
                if rng.below(2) == 0 { "am" } else { "pm" }
            );
            b.slot(&t, "time");
        }
        _ => {
            b.plain("before");
            b.slot("noon", "time");
        }
    }
}

fn maybe(b: &mut Builder, rng: &mut Rng, f: fn(&mut Builder, &mut Rng)) {
    if rng.below(2) == 0 {
        f(b, rng);
    }
}

/// One sentence.
pub fn sentence(rng: &mut Rng) -> TaggedSentence {
    let dept = pick(rng, CITIES);
    let mut arr = pick(rng, CITIES);
    while arr == dept {
        arr = pick(rng, CITIES);
    }
    let mut b = Builder::default();
    match rng.below(11) {
        0 => {
            b.plain("i want to fly from");
            b.slot(dept, "dept");
            b.plain("to");
            b.slot(arr, "arr");
            maybe(&mut b, rng, date);
        }
        1 => {
            b.plain("show me flights from");
            b.slot(dept, "dept");
            b.plain("to");
            b.slot(arr, "arr");
            maybe(&mut b, rng, time);
        }
        2 => {
            b.slot(dept, "dept");
            b.plain("departures to");
            b.slot(arr, "arr");
            maybe(&mut b, rng, date);
        }
        3 => {
            b.slot(arr, "arr");
            b.plain("arrivals from");
            b.slot(dept, "dept");
            maybe(&mut b, rng, time);
        }
        4 => {
            b.plain("flights to");
            b.slot(arr, "arr");
            b.plain("from");
            b.slot(dept, "dept");
            maybe(&mut b, rng, date);
            maybe(&mut b, rng, time);
        }
        5 => {
            b.plain("list flights leaving");
            b.slot(dept, "dept");
            maybe(&mut b, rng, time);
            b.plain("arriving in");
            b.slot(arr, "arr");
        }
        6 => {
            b.plain("what flights go from");
            b.slot(dept, "dept");
            b.plain("to");
            b.slot(arr, "arr");
            date(&mut b, rng);
        }
        7 => {
            b.plain("i need a flight to");
            b.slot(arr, "arr");
            date(&mut b, rng);
            maybe(&mut b, rng, time);
        }
        8 => {
            b.slot(dept, "dept");
            b.plain("to");
            b.slot(arr, "arr");
            date(&mut b, rng);
        }
        9 => {
            b.plain("cheapest fare from");
            b.slot(dept, "dept");
            b.plain("to");
            b.slot(arr, "arr");
        }
        _ => {
            b.slot(arr, "arr");
            b.plain("bound flights from");
            b.slot(dept, "dept");
            maybe(&mut b, rng, date);
        }
    }
    b.finish()
}

/// Corruptions applied on top of the clean grammar.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Noise {
    /// Chance of a filler word before each token (labelled `O`).
    pub filler_rate: f64,
    /// Chance per sentence that every `dept` label becomes `arr` and vice
    /// versa, mimicking annotation errors.
    pub swap_rate: f64,
}

fn corrupt(s: TaggedSentence, noise: &Noise, rng: &mut Rng) -> TaggedSentence {
    let mut out = TaggedSentence {
        words: Vec::with_capacity(s.words.len()),
        labels: Vec::with_capacity(s.labels.len()),
    };
    for (w, l) in s.words.into_iter().zip(s.labels) {
        if noise.filler_rate > 0.0 && !l.starts_with("I-") && rng.uniform() < noise.filler_rate {
            out.words.push(pick(rng, FILLERS).to_string());
            out.labels.push("O".to_string());
        }
        out.words.push(w);
        out.labels.push(l);
    }
    if noise.swap_rate > 0.0 && rng.uniform() < noise.swap_rate {
        for l in &mut out.labels {
            *l = if l.ends_with("-dept") {
                l.replace("-dept", "-arr")
            } else if l.ends_with("-arr") {
                l.replace("-arr", "-dept")
            } else {
                continue;
            };
        }
    }
    out
}

/// `n` sentences from a generator seeded with `seed`.
pub fn generate(n: usize, seed: u64) -> RawCorpus {
    generate_noisy(n, seed, &Noise::default())
}

pub fn generate_noisy(n: usize, seed: u64, noise: &Noise) -> RawCorpus {
    // Separate streams, so the clean sentences do not depend on the noise.
    let mut rng = Rng::new(seed);
    let mut noise_rng = Rng::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    RawCorpus {
        sentences: (0..n)
            .map(|_| corrupt(sentence(&mut rng), noise, &mut noise_rng))
            .collect(),
    }
}

/// Disjointly seeded train, validation and test corpora. Label swaps
/// apply to the training corpus only; fillers apply everywhere.
pub fn splits(
    train: usize,
    val: usize,
    test: usize,
    seed: u64,
    noise: &Noise,
) -> (RawCorpus, RawCorpus, RawCorpus) {
    let base = seed.wrapping_mul(3);
    let held_out = Noise {
        swap_rate: 0.0,
        ..*noise
    };
    (
        generate_noisy(train, base, noise),
        generate_noisy(val, base.wrapping_add(1), &held_out),
        generate_noisy(test, base.wrapping_add(2), &held_out),
    )
}

/// Noise of the bundled desk-scale benchmark.
pub const DESK_NOISE: Noise = Noise {
    filler_rate: 0.1,
    swap_rate: 0.1,
};

/// The bundled benchmark: 2000 / 500 / 500 sentences.
pub fn desk_corpus(seed: u64) -> (RawCorpus, RawCorpus, RawCorpus) {
    splits(2000, 500, 500, seed, &DESK_NOISE)
}
