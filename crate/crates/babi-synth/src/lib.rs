//! Synthetic task files in the bAbI formats.
//!
//! Stories are simulated from a small world of people, places and objects,
//! and written with the same line conventions and file names as the public
//! bAbI releases, so the same loaders read both. Supported: QA tasks 1
//! (single supporting fact), 2 (two supporting facts) and 12 (conjunction),
//! and dialog task 1 (issuing API calls), including its OOV test set.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PEOPLE: [&str; 4] = ["Mary", "John", "Sandra", "Daniel"];
pub const LOCATIONS: [&str; 6] = ["bathroom", "hallway", "kitchen", "garden", "office", "bedroom"];
pub const OBJECTS: [&str; 3] = ["football", "apple", "milk"];

const MOVE: [&str; 4] = ["moved", "went", "journeyed", "travelled"];
const GET: [&str; 4] = ["got", "grabbed", "picked up", "took"];
const DROP: [&str; 4] = ["dropped", "discarded", "put down", "left"];

const QUESTIONS_PER_STORY: usize = 5;

pub const QA_TASKS: [u32; 3] = [1, 2, 12];

/// File stem used by the public release for a QA task.
pub fn qa_task_name(task: u32) -> Option<&'static str> {
    match task {
        1 => Some("single-supporting-fact"),
        2 => Some("two-supporting-facts"),
        12 => Some("conjunction"),
        _ => None,
    }
}

/// Numbered story lines; restarts at 1 on every `begin`.
#[derive(Default)]
struct Story {
    text: String,
    line: usize,
}

impl Story {
    fn begin(&mut self) {
        self.line = 0;
    }

    fn statement(&mut self, s: &str) -> usize {
        self.line += 1;
        let _ = writeln!(self.text, "{} {}", self.line, s);
        self.line
    }

    fn question(&mut self, q: &str, answer: &str, support: &[usize]) {
        self.line += 1;
        let ids: Vec<String> = support.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(self.text, "{} {}\t{}\t{}", self.line, q, answer, ids.join(" "));
    }
}

fn other_location<R: Rng>(rng: &mut R, current: Option<&str>) -> &'static str {
    loop {
        let l = *LOCATIONS.choose(rng).expect("locations");
        if Some(l) != current {
            return l;
        }
    }
}

/// Tasks 1 and 12: people move around; ask where someone is.
fn location_story<R: Rng>(out: &mut Story, rng: &mut R, conjunction: bool) {
    out.begin();
    let mut at: HashMap<&str, (&str, usize)> = HashMap::new();
    for _ in 0..QUESTIONS_PER_STORY {
        for _ in 0..2 {
            let verb = *MOVE.choose(rng).expect("verbs");
            if conjunction {
                let pair: Vec<&str> = PEOPLE.choose_multiple(rng, 2).copied().collect();
                let to = other_location(rng, at.get(pair[0]).map(|p| p.0));
                let line = out.statement(&format!("{} and {} {verb} to the {to}.", pair[0], pair[1]));
                for p in pair {
                    at.insert(p, (to, line));
                }
            } else {
                let p = *PEOPLE.choose(rng).expect("people");
                let to = other_location(rng, at.get(p).map(|x| x.0));
                let line = out.statement(&format!("{p} {verb} to the {to}."));
                at.insert(p, (to, line));
            }
        }
        let mut known: Vec<&str> = at.keys().copied().collect();
        known.sort_unstable();
        let who = *known.choose(rng).expect("someone has moved");
        let (place, line) = at[who];
        out.question(&format!("Where is {who}?"), place, &[line]);
    }
}

#[derive(Clone, Copy)]
enum Whereabouts {
    Unplaced,
    Held(usize, usize),
    At(&'static str, usize),
}

/// Task 2: people carry objects around; ask where an object is.
fn object_story<R: Rng>(out: &mut Story, rng: &mut R) {
    out.begin();
    let mut person_at: [Option<(&'static str, usize)>; 4] = [None; 4];
    let mut objects = [Whereabouts::Unplaced; 3];
    let mut asked = 0;
    let mut since_question = 0;
    while asked < QUESTIONS_PER_STORY {
        let p = rng.random_range(0..PEOPLE.len());
        let who = PEOPLE[p];
        let holding: Vec<usize> = (0..OBJECTS.len())
            .filter(|&o| matches!(objects[o], Whereabouts::Held(h, _) if h == p))
            .collect();
        let here = person_at[p].map(|x| x.0);
        let available: Vec<usize> = (0..OBJECTS.len())
            .filter(|&o| match objects[o] {
                Whereabouts::Unplaced => here.is_some(),
                Whereabouts::At(l, _) => Some(l) == here,
                Whereabouts::Held(..) => false,
            })
            .collect();
        let roll: f64 = rng.random();
        if roll < 0.25 && !available.is_empty() {
            let o = *available.choose(rng).expect("object");
            let verb = *GET.choose(rng).expect("verbs");
            let line = out.statement(&format!("{who} {verb} the {} there.", OBJECTS[o]));
            objects[o] = Whereabouts::Held(p, line);
        } else if roll < 0.4 && !holding.is_empty() {
            let o = *holding.choose(rng).expect("object");
            let verb = *DROP.choose(rng).expect("verbs");
            let line = out.statement(&format!("{who} {verb} the {}.", OBJECTS[o]));
            objects[o] = Whereabouts::At(here.expect("holders have a location"), line);
        } else {
            let verb = *MOVE.choose(rng).expect("verbs");
            let to = other_location(rng, here);
            let line = out.statement(&format!("{who} {verb} to the {to}."));
            person_at[p] = Some((to, line));
        }
        since_question += 1;

        let answerable: Vec<(usize, &str, Vec<usize>)> = (0..OBJECTS.len())
            .filter_map(|o| match objects[o] {
                Whereabouts::Held(h, took) => {
                    let (place, moved) = person_at[h].expect("holders have a location");
                    Some((o, place, vec![took.min(moved), took.max(moved)]))
                }
                Whereabouts::At(place, dropped) => Some((o, place, vec![dropped])),
                Whereabouts::Unplaced => None,
            })
            .collect();
        if since_question >= 2 && !answerable.is_empty() && rng.random_bool(0.4) {
            let (o, place, support) = answerable.choose(rng).expect("answerable");
            out.question(&format!("Where is the {}?", OBJECTS[*o]), place, support);
            asked += 1;
            since_question = 0;
        }
    }
}

/// A QA task file with `questions` questions (rounded up to whole stories).
pub fn qa_file(task: u32, questions: usize, seed: u64) -> Option<String> {
    qa_task_name(task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut story = Story::default();
    for _ in 0..questions.div_ceil(QUESTIONS_PER_STORY) {
        match task {
            1 => location_story(&mut story, &mut rng, false),
            12 => location_story(&mut story, &mut rng, true),
            _ => object_story(&mut story, &mut rng),
        }
    }
    Some(story.text)
}

/// Writes `qa{task}_{name}_train.txt` and `_test.txt` into `dir`.
pub fn write_qa_task(dir: &Path, task: u32, train: usize, test: usize, seed: u64) -> io::Result<(PathBuf, PathBuf)> {
    let name = qa_task_name(task)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("no generator for QA task {task}")))?;
    fs::create_dir_all(dir)?;
    let train_path = dir.join(format!("qa{task}_{name}_train.txt"));
    let test_path = dir.join(format!("qa{task}_{name}_test.txt"));
    fs::write(&train_path, qa_file(task, train, seed).expect("known task"))?;
    fs::write(&test_path, qa_file(task, test, seed ^ 0x7e57).expect("known task"))?;
    Ok((train_path, test_path))
}

pub const CUISINES: [&str; 10] = [
    "british", "cantonese", "french", "indian", "italian", "japanese", "korean", "spanish", "thai", "vietnamese",
];
pub const CITIES: [&str; 10] = [
    "bangkok", "beijing", "bombay", "hanoi", "london", "madrid", "paris", "rome", "seoul", "tokyo",
];
/// Entities that only occur in the OOV test set.
pub const OOV_CUISINES: [&str; 5] = ["ethiopian", "german", "mexican", "greek", "turkish"];
pub const OOV_CITIES: [&str; 5] = ["lisbon", "oslo", "cairo", "lima", "dublin"];
pub const PARTY_SIZES: [&str; 4] = ["two", "four", "six", "eight"];
pub const PRICES: [&str; 3] = ["cheap", "moderate", "expensive"];

const GREETING_REPLY: &str = "hello what can i help you with today";
const ON_IT: &str = "i'm on it";
const LOOKING: &str = "ok let me look into some options for you";
const ASK: [&str; 4] = [
    "any preference on a type of cuisine",
    "where should it be",
    "how many people would be in your party",
    "which price range are looking for",
];

/// Every system utterance of dialog task 1, one per line, numbered like the
/// public candidates file.
pub fn dialog_candidates() -> String {
    let mut lines: Vec<String> = vec![GREETING_REPLY.into(), ON_IT.into(), LOOKING.into()];
    lines.extend(ASK.iter().map(|s| s.to_string()));
    for c in CUISINES.iter().chain(&OOV_CUISINES) {
        for l in CITIES.iter().chain(&OOV_CITIES) {
            for n in PARTY_SIZES {
                for p in PRICES {
                    lines.push(format!("api_call {c} {l} {n} {p}"));
                }
            }
        }
    }
    lines.iter().map(|l| format!("1 {l}\n")).collect()
}

fn slot_phrase<R: Rng>(slot: usize, value: &str, rng: &mut R) -> String {
    let options: &[String] = &match slot {
        0 => vec![format!("with {value} food"), format!("with {value} cuisine")],
        1 => vec![format!("in {value}")],
        2 => vec![format!("for {value} people"), format!("for {value}")],
        _ => vec![format!("in a {value} price range")],
    };
    options.choose(rng).expect("phrase").clone()
}

fn slot_answer<R: Rng>(slot: usize, value: &str, rng: &mut R) -> String {
    let options: &[String] = &match slot {
        0 => vec![format!("{value} food"), format!("i love {value} food")],
        1 => vec![format!("{value} please"), format!("in {value}")],
        2 => vec![format!("for {value} please"), format!("we will be {value}")],
        _ => vec![format!("in a {value} price range please"), format!("i am looking for a {value} restaurant")],
    };
    options.choose(rng).expect("answer").clone()
}

fn dialog<R: Rng>(out: &mut Story, rng: &mut R, cuisines: &[&str], cities: &[&str]) {
    out.begin();
    let values = [
        *cuisines.choose(rng).expect("cuisine"),
        *cities.choose(rng).expect("city"),
        *PARTY_SIZES.choose(rng).expect("size"),
        *PRICES.choose(rng).expect("price"),
    ];
    let mut given: Vec<usize> = (0..4).filter(|_| rng.random_bool(0.5)).collect();
    given.shuffle(rng);
    let greeting = *["hi", "hello", "good morning", "hey there"].choose(rng).expect("greeting");
    out.statement(&format!("{greeting}\t{GREETING_REPLY}"));

    let opener = *["can you book a table", "may i have a table", "i'd like to book a table"]
        .choose(rng)
        .expect("opener");
    let mut request = opener.to_string();
    for &s in &given {
        request.push(' ');
        request.push_str(&slot_phrase(s, values[s], rng));
    }
    out.statement(&format!("{request}\t{ON_IT}"));

    let mut user = "<SILENCE>".to_string();
    for slot in (0..4).filter(|s| !given.contains(s)) {
        out.statement(&format!("{user}\t{}", ASK[slot]));
        user = slot_answer(slot, values[slot], rng);
    }
    out.statement(&format!("{user}\t{LOOKING}"));
    out.statement(&format!("<SILENCE>\tapi_call {}", values.join(" ")));
}

/// A dialog task 1 file with `dialogs` dialogs, blank-line separated.
pub fn dialog_file(dialogs: usize, seed: u64, oov: bool) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cuisines, cities): (&[&str], &[&str]) = if oov {
        (&OOV_CUISINES, &OOV_CITIES)
    } else {
        (&CUISINES, &CITIES)
    };
    let mut story = Story::default();
    for _ in 0..dialogs {
        dialog(&mut story, &mut rng, cuisines, cities);
        story.text.push('\n');
    }
    story.text
}

/// Writes the task 1 train, test and OOV test files plus the candidates file.
pub fn write_dialog_task(dir: &Path, train: usize, test: usize, seed: u64) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let stem = "dialog-babi-task1-API-calls";
    let files = [
        (format!("{stem}-trn.txt"), dialog_file(train, seed, false)),
        (format!("{stem}-tst.txt"), dialog_file(test, seed ^ 0x7e57, false)),
        (format!("{stem}-tst-OOV.txt"), dialog_file(test, seed ^ 0x00f, true)),
        ("dialog-babi-candidates.txt".to_string(), dialog_candidates()),
    ];
    let mut paths = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text)?;
        paths.push(path);
    }
    Ok(paths)
}
