//! bAbI QA and dialog parsers, context capping, dev splits and a flat
//! line-per-example dump format.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoding::{IndexedExample, Vocabulary, NIL};
use crate::error::{QrnError, Result};

/// Longest context kept per example; older sentences are dropped.
pub const DEFAULT_CONTEXT_CAP: usize = 200;

/// One question (or dialog turn) with everything seen before it.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub context: Vec<String>,
    pub question: String,
    pub answer: String,
    /// Story line numbers of the supporting facts. Never used for training.
    pub supporting_ids: Vec<usize>,
    pub task_id: u32,
    /// Response candidates shared by every turn of a dialog dataset.
    pub candidates: Option<Arc<Vec<String>>>,
}

impl Example {
    /// Keeps only the most recent `cap` context sentences.
    pub fn truncate_context(&mut self, cap: usize) {
        if self.context.len() > cap {
            self.context.drain(..self.context.len() - cap);
        }
    }
}

pub fn cap_context(examples: &mut [Example], cap: usize) {
    examples.iter_mut().for_each(|e| e.truncate_context(cap));
}

fn split_number(line: &str, lineno: usize) -> Result<(usize, &str)> {
    let line = line.trim_start();
    let (head, rest) = line.split_once(' ').unwrap_or((line, ""));
    let n = head.parse::<usize>().map_err(|_| QrnError::Parse {
        line: lineno,
        msg: format!("expected a leading line number, found `{head}`"),
    })?;
    Ok((n, rest.trim()))
}

/// Parses the numbered bAbI QA format. A line number of 1 starts a new
/// story; lines with a tab are questions `question \t answer \t ids`.
pub fn parse_babi_qa(text: &str, task_id: u32) -> Result<Vec<Example>> {
    let mut examples = Vec::new();
    let mut story: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (n, rest) = split_number(raw, lineno)?;
        if n == 1 {
            story.clear();
        }
        if !rest.contains('\t') {
            if rest.is_empty() {
                return Err(QrnError::Parse {
                    line: lineno,
                    msg: "empty statement".into(),
                });
            }
            story.push(rest.to_string());
            continue;
        }
        let mut fields = rest.split('\t');
        let question = fields.next().unwrap_or("").trim();
        let answer = fields.next().unwrap_or("").trim();
        if question.is_empty() || answer.is_empty() {
            return Err(QrnError::Parse {
                line: lineno,
                msg: "question line needs a question and an answer".into(),
            });
        }
        let supporting_ids = fields
            .next()
            .unwrap_or("")
            .split_whitespace()
            .map(|s| {
                s.parse::<usize>().map_err(|_| QrnError::Parse {
                    line: lineno,
                    msg: format!("bad supporting fact id `{s}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if story.is_empty() {
            return Err(QrnError::Parse {
                line: lineno,
                msg: "question has no preceding statements".into(),
            });
        }
        examples.push(Example {
            context: story.clone(),
            question: question.to_string(),
            answer: answer.to_string(),
            supporting_ids,
            task_id,
            candidates: None,
        });
    }
    Ok(examples)
}

/// Candidate file: one response per line, each with a leading number.
pub fn parse_candidates(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let (_, rest) = split_number(raw, i + 1)?;
        if rest.is_empty() {
            return Err(QrnError::Parse {
                line: i + 1,
                msg: "empty candidate".into(),
            });
        }
        out.push(rest.to_string());
    }
    Ok(out)
}

/// Knowledge-base lines carry a restaurant entity and an `R_` attribute.
fn is_kb_fact(rest: &str) -> bool {
    let mut words = rest.split_whitespace();
    matches!((words.next(), words.next()), (Some(_), Some(attr)) if attr.starts_with("R_"))
}

/// Parses bAbI dialog turns `n user \t system`. Each turn becomes an
/// example whose context is every earlier utterance and KB fact of the
/// dialog; the first turn gets a single NIL sentence.
pub fn parse_babi_dialog(text: &str, candidates: Arc<Vec<String>>, task_id: u32) -> Result<Vec<Example>> {
    let mut examples = Vec::new();
    let mut history: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        if raw.trim().is_empty() {
            history.clear();
            continue;
        }
        let (n, rest) = split_number(raw, lineno)?;
        if n == 1 {
            history.clear();
        }
        match rest.split_once('\t') {
            Some((user, system)) => {
                let (user, system) = (user.trim(), system.trim());
                if user.is_empty() || system.is_empty() {
                    return Err(QrnError::Parse {
                        line: lineno,
                        msg: "turn needs a user utterance and a system response".into(),
                    });
                }
                let context = if history.is_empty() {
                    vec![NIL.to_string()]
                } else {
                    history.clone()
                };
                examples.push(Example {
                    context,
                    question: user.to_string(),
                    answer: system.to_string(),
                    supporting_ids: Vec::new(),
                    task_id,
                    candidates: Some(Arc::clone(&candidates)),
                });
                history.push(user.to_string());
                history.push(system.to_string());
            }
            None if is_kb_fact(rest) => history.push(rest.to_string()),
            None => {
                return Err(QrnError::Parse {
                    line: lineno,
                    msg: "dialog turn is missing the tab between user and system".into(),
                })
            }
        }
    }
    Ok(examples)
}

/// Seeded shuffle, then the last `⌈fraction·N⌉` examples become dev.
pub fn split_dev(mut train: Vec<Example>, fraction: f64, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(QrnError::Input(format!(
            "dev fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train.shuffle(&mut rng);
    let n_dev = (fraction * train.len() as f64).ceil() as usize;
    let dev = train.split_off(train.len() - n_dev.min(train.len()));
    Ok((train, dev))
}

const JOINER: &str = " | ";

fn check_field(value: &str, what: &str) -> Result<()> {
    if value.is_empty() || value.contains('\t') || value.contains('\n') || value.contains(JOINER.trim()) {
        return Err(QrnError::Input(format!(
            "{what} `{value}` cannot be written to a dump (empty or contains a separator)"
        )));
    }
    Ok(())
}

/// One example per line: task, context (sentences joined by ` | `),
/// question, answer, supporting ids, candidates; fields tab-separated.
pub fn dump_examples(examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        for s in &ex.context {
            check_field(s, "context sentence")?;
        }
        check_field(&ex.question, "question")?;
        check_field(&ex.answer, "answer")?;
        let candidates = match &ex.candidates {
            None => String::new(),
            Some(c) if c.is_empty() => {
                return Err(QrnError::Input("empty candidate list cannot be dumped".into()))
            }
            Some(c) => {
                for s in c.iter() {
                    check_field(s, "candidate")?;
                }
                c.join(JOINER)
            }
        };
        let ids: Vec<String> = ex.supporting_ids.iter().map(usize::to_string).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            ex.task_id,
            ex.context.join(JOINER),
            ex.question,
            ex.answer,
            ids.join(" "),
            candidates
        ));
    }
    Ok(out)
}

pub fn parse_dump(text: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut last_candidates: Option<Arc<Vec<String>>> = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(QrnError::Parse {
                line: lineno,
                msg: format!("expected 6 tab-separated fields, found {}", fields.len()),
            });
        }
        let task_id = fields[0].parse().map_err(|_| QrnError::Parse {
            line: lineno,
            msg: format!("bad task id `{}`", fields[0]),
        })?;
        let supporting_ids = fields[4]
            .split_whitespace()
            .map(|s| {
                s.parse().map_err(|_| QrnError::Parse {
                    line: lineno,
                    msg: format!("bad supporting fact id `{s}`"),
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        let candidates = if fields[5].is_empty() {
            None
        } else {
            let list: Vec<String> = fields[5].split(JOINER).map(str::to_string).collect();
            // consecutive turns share one list, as they do after parsing
            match &last_candidates {
                Some(prev) if **prev == list => Some(Arc::clone(prev)),
                _ => {
                    let arc = Arc::new(list);
                    last_candidates = Some(Arc::clone(&arc));
                    Some(arc)
                }
            }
        };
        out.push(Example {
            context: fields[1].split(JOINER).map(str::to_string).collect(),
            question: fields[2].to_string(),
            answer: fields[3].to_string(),
            supporting_ids,
            task_id,
            candidates,
        });
    }
    Ok(out)
}

/// Train and test examples of one task as found on disk.
#[derive(Clone, Debug)]
pub struct TaskFiles {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| QrnError::io(path, e))
}

fn find_file(dir: &Path, matches: impl Fn(&str) -> bool) -> Result<PathBuf> {
    let entries = std::fs::read_dir(dir).map_err(|e| QrnError::io(dir, e))?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(&matches))
        .collect();
    found.sort();
    found.into_iter().next().ok_or_else(|| {
        QrnError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no matching task file"),
        )
    })
}

/// Loads `qa{task}_*_train.txt` and `qa{task}_*_test.txt` from `dir`.
pub fn load_qa_task(dir: &Path, task: u32) -> Result<TaskFiles> {
    let prefix = format!("qa{task}_");
    let train_path = find_file(dir, |n| n.starts_with(&prefix) && n.ends_with("_train.txt"))?;
    let test_path = find_file(dir, |n| n.starts_with(&prefix) && n.ends_with("_test.txt"))?;
    Ok(TaskFiles {
        train: parse_babi_qa(&read_file(&train_path)?, task)?,
        test: parse_babi_qa(&read_file(&test_path)?, task)?,
        train_path,
        test_path,
    })
}

/// Loads `dialog-babi-task{task}-*-trn.txt` / `-tst.txt` with the shared
/// `dialog-babi-candidates.txt`. With `oov`, the test file is `-tst-OOV.txt`.
pub fn load_dialog_task(dir: &Path, task: u32, oov: bool) -> Result<TaskFiles> {
    let prefix = format!("dialog-babi-task{task}-");
    let cand_path = dir.join("dialog-babi-candidates.txt");
    let candidates = Arc::new(parse_candidates(&read_file(&cand_path)?)?);
    let train_path = find_file(dir, |n| n.starts_with(&prefix) && n.ends_with("-trn.txt"))?;
    let test_suffix = if oov { "-tst-OOV.txt" } else { "-tst.txt" };
    let test_path = find_file(dir, |n| n.starts_with(&prefix) && n.ends_with(test_suffix))?;
    Ok(TaskFiles {
        train: parse_babi_dialog(&read_file(&train_path)?, Arc::clone(&candidates), task)?,
        test: parse_babi_dialog(&read_file(&test_path)?, candidates, task)?,
        train_path,
        test_path,
    })
}

/// Indexed train/dev/test examples with the vocabulary built from the
/// original training file.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<IndexedExample>,
    pub dev: Vec<IndexedExample>,
    pub test: Vec<IndexedExample>,
    pub vocab: Vocabulary,
    /// Test examples before indexing, for display.
    pub test_examples: Vec<Example>,
}

impl DatasetSplit {
    /// Caps contexts, withholds `dev_fraction` of the training examples and
    /// indexes everything. Test words unseen in training map to UNK.
    pub fn prepare(files: &TaskFiles, dev_fraction: f64, seed: u64, context_cap: usize) -> Result<Self> {
        let mut train = files.train.clone();
        let mut test = files.test.clone();
        cap_context(&mut train, context_cap);
        cap_context(&mut test, context_cap);
        let vocab = Vocabulary::build(&train)?;
        let (train, dev) = split_dev(train, dev_fraction, seed)?;
        Ok(DatasetSplit {
            train: vocab.index_all(&train)?,
            dev: vocab.index_all(&dev)?,
            test: vocab.index_all(&test)?,
            vocab,
            test_examples: test,
        })
    }

    /// Longest candidate response in words (0 for QA data).
    pub fn max_response_len(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        self.train
            .iter()
            .chain(&self.test)
            .filter_map(|e| e.candidates.as_ref())
            .filter(|c| seen.insert(Arc::as_ptr(c)))
            .flat_map(|c| c.iter().map(Vec::len))
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_line_story() {
        let ex = parse_babi_qa("1 Sandra got the apple there.\n2 Where is the apple?\tkitchen\t1\n", 2).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].context, vec!["Sandra got the apple there."]);
        assert_eq!(ex[0].answer, "kitchen");
        assert_eq!(ex[0].supporting_ids, vec![1]);
    }

    #[test]
    fn questions_share_growing_context() {
        let text = "1 Mary went to the hallway.\n2 Where is Mary?\thallway\t1\n3 John went to the office.\n4 Where is John?\toffice\t3\n1 Daniel moved to the garden.\n2 Where is Daniel?\tgarden\t1\n";
        let ex = parse_babi_qa(text, 1).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[1].context.len(), 2);
        assert_eq!(ex[0].context[..], ex[1].context[..1]);
        assert_eq!(ex[2].context, vec!["Daniel moved to the garden."]);
    }

    #[test]
    fn list_answer_kept_verbatim() {
        let ex = parse_babi_qa("1 Mary got the football.\n2 What is Mary carrying?\tfootball,apple\t1\n", 8).unwrap();
        assert_eq!(ex[0].answer, "football,apple");
    }

    #[test]
    fn missing_number_reports_line() {
        let err = parse_babi_qa("1 Mary went home.\nWhere is Mary?\thome\t1\n", 1).unwrap_err();
        assert!(matches!(err, QrnError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn dialog_turns() {
        let cands = Arc::new(vec!["hello what can i help you with today".to_string()]);
        let text = "1 hi\thello what can i help you with today\n2 may i have a table\ti'm on it\n\n1 hello\thello what can i help you with today\n";
        let ex = parse_babi_dialog(text, cands, 1).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[0].context, vec![NIL.to_string()]);
        assert_eq!(ex[1].context, vec!["hi", "hello what can i help you with today"]);
        assert_eq!(ex[1].answer, "i'm on it");
        assert_eq!(ex[2].context, vec![NIL.to_string()]);
    }

    #[test]
    fn dialog_kb_lines_join_context_and_bad_lines_fail() {
        let cands = Arc::new(vec!["ok".to_string()]);
        let text = "1 resto_1 R_cuisine italian\n2 <SILENCE>\tok\n";
        let ex = parse_babi_dialog(text, Arc::clone(&cands), 3).unwrap();
        assert_eq!(ex[0].context, vec!["resto_1 R_cuisine italian"]);
        assert_eq!(ex[0].question, "<SILENCE>");
        let err = parse_babi_dialog("1 no tab here\n", cands, 1).unwrap_err();
        assert!(matches!(err, QrnError::Parse { line: 1, .. }));
    }

    #[test]
    fn cap_keeps_most_recent() {
        let mut ex = Example {
            context: (0..5).map(|i| format!("s{i}")).collect(),
            question: "q".into(),
            answer: "a".into(),
            supporting_ids: vec![],
            task_id: 1,
            candidates: None,
        };
        ex.truncate_context(2);
        assert_eq!(ex.context, vec!["s3", "s4"]);
    }
}
