//! Synthetic Python-like corpora shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NOUNS: &[&str] = &[
    "item", "value", "node", "path", "count", "buffer", "result", "config", "record", "key",
    "index", "name",
];
const VERBS: &[&str] = &[
    "get", "set", "load", "parse", "build", "update", "check", "find", "read", "write",
];
const MODULES: &[&str] = &[
    "os", "sys", "json", "re", "math", "typing", "pathlib", "logging",
];
const COLLECTIONS: &[&str] = &["items", "values", "self.nodes", "records", "keys", "lines"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn pick<'a>(r: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(r).unwrap()
}

fn statement(r: &mut ChaCha8Rng, indent: &str, out: &mut String) {
    let a = pick(r, NOUNS);
    let b = pick(r, NOUNS);
    match r.gen_range(0..7) {
        0 => out.push_str(&format!("{indent}{a} = {b} + {}\n", r.gen_range(0..10))),
        1 => out.push_str(&format!("{indent}{a} = self.{}_{b}({a})\n", pick(r, VERBS))),
        2 => {
            out.push_str(&format!("{indent}if {a} is None:\n"));
            out.push_str(&format!("{indent}    return {b}\n"));
        }
        3 => {
            out.push_str(&format!("{indent}for {a} in {}:\n", pick(r, COLLECTIONS)));
            out.push_str(&format!("{indent}    {b}.append({a})\n"));
        }
        4 => out.push_str(&format!(
            "{indent}logger.info(\"{} %s\", {a})\n",
            pick(r, VERBS)
        )),
        5 => out.push_str(&format!("{indent}{a}[{b}] = {}\n", r.gen_range(0..100))),
        _ => out.push_str(&format!("{indent}assert {a} == {b}\n")),
    }
}

fn function(r: &mut ChaCha8Rng, indent: &str, method: bool, out: &mut String) {
    let name = format!("{}_{}", pick(r, VERBS), pick(r, NOUNS));
    let arg = pick(r, NOUNS);
    let selfarg = if method { "self, " } else { "" };
    out.push_str(&format!("{indent}def {name}({selfarg}{arg}):\n"));
    let body = format!("{indent}    ");
    for _ in 0..r.gen_range(1..5) {
        statement(r, &body, out);
    }
    out.push_str(&format!("{body}return {arg}\n\n"));
}

/// One Python-like module.
pub fn python_file(r: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    for _ in 0..r.gen_range(1..4) {
        out.push_str(&format!("import {}\n", pick(r, MODULES)));
    }
    out.push_str("\nlogger = logging.getLogger(__name__)\n\n\n");
    for _ in 0..r.gen_range(1..4) {
        if r.gen_bool(0.5) {
            let cls = format!(
                "{}{}",
                capitalize(pick(r, NOUNS)),
                capitalize(pick(r, VERBS))
            );
            out.push_str(&format!("class {cls}:\n"));
            for _ in 0..r.gen_range(1..4) {
                function(r, "    ", true, &mut out);
            }
            out.push('\n');
        } else {
            function(r, "", false, &mut out);
            out.push('\n');
        }
    }
    out
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_ascii_uppercase().to_string() + c.as_str())
        .unwrap_or_default()
}

/// Several modules concatenated until at least `min_chars` characters.
pub fn python_corpus(seed: u64, min_chars: usize) -> Vec<String> {
    let mut r = rng(seed);
    let mut files = Vec::new();
    let mut total = 0;
    while total < min_chars {
        let f = python_file(&mut r);
        total += f.len();
        files.push(f);
    }
    files
}

/// A module whose methods repeat a small set of bodies, as in boilerplate
/// classes.
pub fn repetitive_file(r: &mut ChaCha8Rng, methods: usize) -> String {
    let mut templates = Vec::new();
    for _ in 0..3 {
        let mut body = String::new();
        for _ in 0..r.gen_range(2..4) {
            statement(r, "        ", &mut body);
        }
        templates.push(body);
    }
    let cls = capitalize(pick(r, NOUNS));
    let mut out = format!("class {cls}Handler:\n");
    for i in 0..methods {
        let arg = pick(r, NOUNS);
        out.push_str(&format!(
            "    def handle_{}_{i}(self, {arg}):\n",
            pick(r, NOUNS)
        ));
        out.push_str(templates.choose(r).unwrap());
        out.push_str(&format!("        return {arg}\n\n"));
    }
    out
}
