//! Deterministic generator of tiny Python tasks.
//!
//! These power the bundled fixtures: the byte-level toy vocabulary, the
//! overfit probe, and the end-to-end smoke pipeline. Solutions and tests are
//! generated together so every record actually passes its own tests.

use super::{CorpusRecord, Difficulty, TaskRecord};

/// Generates `n` small tasks. `seed` perturbs the embedded constants so
/// different fixtures do not share literal tests.
pub fn synthetic_tasks(n: usize, seed: u64) -> Vec<CorpusRecord> {
    (0..n).map(|i| make_task(i, seed)).collect()
}

fn make_task(i: usize, seed: u64) -> CorpusRecord {
    let a = ((i as u64 * 7 + seed * 3) % 9 + 1) as i64;
    let b = ((i as u64 * 5 + seed) % 8 + 1) as i64;
    let difficulty = match i % 3 {
        0 => Difficulty::Easy,
        1 => Difficulty::Medium,
        _ => Difficulty::Hard,
    };
    let (question, solutions, tests): (String, Vec<String>, Vec<String>) = match i % 8 {
        0 => (
            "Write a function f(a, b) returning the sum of a and b.".into(),
            vec![
                "def f(a, b):\n    return a + b".into(),
                "def f(a, b):\n    return b + a".into(),
            ],
            vec![
                format!("assert f({a}, {b}) == {}", a + b),
                format!("assert f(0, {b}) == {b}"),
            ],
        ),
        1 => (
            "Write a function f(a, b) returning a minus b.".into(),
            vec!["def f(a, b):\n    return a - b".into()],
            vec![
                format!("assert f({a}, {b}) == {}", a - b),
                format!("assert f({a}, 0) == {a}"),
            ],
        ),
        2 => (
            "Write a function f(a, b) returning the product of a and b.".into(),
            vec![
                "def f(a, b):\n    return a * b".into(),
                "def f(a, b):\n    return b * a".into(),
            ],
            vec![format!("assert f({a}, {b}) == {}", a * b)],
        ),
        3 => (
            "Write a function f(a, b) returning the larger of a and b.".into(),
            vec![
                "def f(a, b):\n    return max(a, b)".into(),
                "def f(a, b):\n    if a > b:\n        return a\n    return b".into(),
            ],
            vec![format!("assert f({a}, {b}) == {}", a.max(b))],
        ),
        4 => (
            "Write a function f(x) returning the square of x.".into(),
            vec!["def f(x):\n    return x * x".into()],
            vec![
                format!("assert f({a}) == {}", a * a),
                "assert f(0) == 0".into(),
            ],
        ),
        5 => (
            "Write a function f(x) returning twice x.".into(),
            vec![
                "def f(x):\n    return 2 * x".into(),
                "def f(x):\n    return x + x".into(),
            ],
            vec![format!("assert f({a}) == {}", 2 * a)],
        ),
        6 => (
            "Write a function f(xs) returning the number of items in xs.".into(),
            vec!["def f(xs):\n    return len(xs)".into()],
            vec![
                format!("assert f([0] * {a}) == {a}"),
                "assert f([]) == 0".into(),
            ],
        ),
        _ => (
            "Write a function f(x) returning True when x is even.".into(),
            vec!["def f(x):\n    return x % 2 == 0".into()],
            vec![
                format!("assert f({}) == True", 2 * a),
                format!("assert f({}) == False", 2 * a + 1),
            ],
        ),
    };
    CorpusRecord::primary(TaskRecord {
        id: format!("syn-{seed}-{i:03}"),
        question,
        solutions,
        tests,
        difficulty,
    })
}
