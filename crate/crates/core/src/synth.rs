//! Seeded generator of small Python functions with one-line summaries, used
//! as the toy corpus for every training stage.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cpg::{extract, CodePropertyGraph, SourceUnit};
use crate::error::Result;

pub const SUMMARIZE_INSTRUCTION: &str = "Generate a Python docstring for the code below.";
pub const TRANSLATE_INSTRUCTION: &str = "Translate the following Python code to Java.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProgram {
    pub id: String,
    pub template: usize,
    pub code: String,
    pub summary: String,
}

/// One supervised example for instruction-based adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub id: String,
    pub code: String,
    pub instruction: String,
    pub answer: String,
}

impl From<&SynthProgram> for TaskExample {
    fn from(p: &SynthProgram) -> Self {
        TaskExample {
            id: p.id.clone(),
            code: p.code.clone(),
            instruction: SUMMARIZE_INSTRUCTION.to_string(),
            answer: p.summary.clone(),
        }
    }
}

const SEQS: &[&str] = &["data", "items", "values", "nums", "xs", "seq", "rows", "arr", "vals", "elems", "lst", "buf"];
const SCALARS: &[&str] = &["total", "acc", "result", "count", "best", "out", "res", "agg", "score", "cur"];
const ELEMS: &[&str] = &["x", "v", "item", "elem", "e", "val", "entry", "y"];
const FUNCS: &[&str] = &["compute", "process", "handle", "run", "calc", "apply", "evaluate", "reduce", "solve", "walk"];

struct Names {
    f: String,
    g: String,
    xs: String,
    t: String,
    x: String,
    k: String,
    i: String,
    c: i64,
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool.choose(rng).unwrap()
}

impl Names {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let f = format!("{}_{}", pick(rng, FUNCS), rng.gen_range(0..1000));
        let g = format!("helper_{}", rng.gen_range(0..1000));
        let xs = pick(rng, SEQS).to_string();
        let t = pick(rng, SCALARS).to_string();
        let x = pick(rng, ELEMS).to_string();
        let k = ["k", "limit", "bound", "cut", "step"].choose(rng).unwrap().to_string();
        let i = ["i", "j", "idx", "pos"].choose(rng).unwrap().to_string();
        Names {
            f,
            g,
            xs,
            t,
            x,
            k,
            i,
            c: rng.gen_range(1..10),
        }
    }
}

const SUMMARIES: &[&str] = &[
    "Return the sum of all values.",
    "Return the largest value.",
    "Count values greater than a threshold.",
    "Keep only the even values.",
    "Add up a decreasing counter until it reaches zero.",
    "Divide two numbers with a fallback on division by zero.",
    "Classify a number as high, low or mid.",
    "Return the index of a target value or -1.",
    "Compute the factorial recursively.",
    "Sum every entry of a nested list.",
    "Count the lines in a file.",
    "Reverse a string.",
    "Count occurrences of each value.",
    "Sum the squares of the values.",
    "List numbers up to n that are not multiples of k.",
];

pub const NUM_TEMPLATES: usize = 15;

fn body(template: usize, n: &Names) -> String {
    let Names { f, g, xs, t, x, k, i, c } = n;
    match template {
        0 => format!("def {f}({xs}):\n    {t} = 0\n    for {x} in {xs}:\n        {t} += {x}\n    return {t}\n"),
        1 => format!(
            "def {f}({xs}):\n    {t} = {xs}[0]\n    for {x} in {xs}:\n        if {x} > {t}:\n            {t} = {x}\n    return {t}\n"
        ),
        2 => format!(
            "def {f}({xs}, {k}):\n    {t} = 0\n    for {x} in {xs}:\n        if {x} > {k}:\n            {t} += 1\n    return {t}\n"
        ),
        3 => format!("def {f}({xs}):\n    return [{x} for {x} in {xs} if {x} % 2 == 0]\n"),
        4 => format!(
            "def {f}({k}):\n    {t} = 0\n    while {k} > 0:\n        {t} += {k}\n        {k} -= {c}\n    return {t}\n"
        ),
        5 => format!(
            "def {f}({x}, {k}):\n    try:\n        {t} = {x} / {k}\n    except ZeroDivisionError:\n        {t} = {c}\n    return {t}\n"
        ),
        6 => format!(
            "def {f}({x}):\n    if {x} > {c}:\n        return \"high\"\n    elif {x} < -{c}:\n        return \"low\"\n    else:\n        return \"mid\"\n"
        ),
        7 => format!(
            "def {f}({xs}, {x}):\n    {t} = -1\n    for {i} in range(len({xs})):\n        if {xs}[{i}] == {x}:\n            {t} = {i}\n            break\n    return {t}\n"
        ),
        8 => format!("def {f}({k}):\n    if {k} <= 1:\n        return 1\n    return {k} * {f}({k} - 1)\n"),
        9 => format!(
            "def {f}({xs}):\n    {t} = 0\n    for {i} in {xs}:\n        for {x} in {i}:\n            {t} += {x}\n    return {t}\n"
        ),
        10 => format!("def {f}({k}):\n    with open({k}) as {x}:\n        {t} = {x}.readlines()\n    return len({t})\n"),
        11 => format!(
            "def {f}({xs}):\n    {t} = \"\"\n    for {x} in {xs}:\n        {t} = {x} + {t}\n    return {t}\n"
        ),
        12 => format!(
            "def {f}({xs}):\n    {t} = {{}}\n    for {x} in {xs}:\n        {t}[{x}] = {t}.get({x}, 0) + 1\n    return {t}\n"
        ),
        13 => format!("def {g}({x}):\n    return {x} * {x}\n\n\ndef {f}({xs}):\n    return sum([{g}({x}) for {x} in {xs}])\n"),
        14 => format!(
            "def {f}({k}):\n    {t} = []\n    for {i} in range(1, {k} + 1):\n        if {i} % {c} == 0:\n            continue\n        {t}.append({i})\n    return {t}\n"
        ),
        _ => unreachable!("template index out of range"),
    }
}

/// Optional structural noise: a guard clause or a scratch assignment at the
/// top of the function body.
fn decorate(code: String, n: &Names, rng: &mut ChaCha8Rng) -> String {
    let (head, rest) = code.split_once('\n').unwrap();
    match rng.gen_range(0..4) {
        0 => format!("{head}\n    if {} is None:\n        return None\n{rest}", first_param(head)),
        1 => format!("{head}\n    scratch = {}\n{rest}", n.c * 10),
        _ => code,
    }
}

fn first_param(head: &str) -> &str {
    let open = head.find('(').unwrap() + 1;
    let close = head[open..].find([',', ')']).unwrap() + open;
    &head[open..close]
}

pub fn generate_program(template: usize, seed: u64) -> SynthProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Names::draw(&mut rng);
    // Loop-target names must differ from the accumulators they feed.
    while names.x == names.t || names.i == names.x || names.k == names.x {
        names = Names::draw(&mut rng);
    }
    let code = decorate(body(template, &names), &names, &mut rng);
    SynthProgram {
        id: format!("synth-{template:02}-{seed:016x}"),
        template,
        code,
        summary: SUMMARIES[template].to_string(),
    }
}

/// `n` programs cycling through all templates.
pub fn synth_corpus(n: usize, seed: u64) -> Vec<SynthProgram> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| generate_program(i % NUM_TEMPLATES, rng.gen()))
        .collect()
}

pub fn extract_program(p: &SynthProgram) -> Result<CodePropertyGraph> {
    extract(&SourceUnit::python(&p.id, &p.code)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_template_extracts() {
        for t in 0..NUM_TEMPLATES {
            for s in 0..8 {
                let p = generate_program(t, s);
                let g = extract_program(&p).unwrap_or_else(|e| panic!("{e}\n{}", p.code));
                g.validate().unwrap();
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(synth_corpus(20, 4), synth_corpus(20, 4));
        assert_ne!(synth_corpus(20, 4), synth_corpus(20, 5));
    }
}
