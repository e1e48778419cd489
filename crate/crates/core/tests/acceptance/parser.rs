use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};

use adreason_core::geometry::BBox;
use adreason_core::response::{parse_response, render_response, AnomalyInstance, ResponseDoc, Verdict};
use adreason_core::textgen::{generation_user_prompt, inference_user_prompt};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

const WORDS: &[&str] = &[
    "the", "second", "image", "shows", "a", "crack", "near", "[10,", "20]", "Yes", "No.", "'label'", "x<y", "a>b",
    "{'bbox_2d':", "compared", "reference,", "surface;", "scratch", "ok!", "(hint)", "0.5",
];
const LABELS: &[&str] = &["crack", "broken", "scratch", "color", "missing part", "fold", "poke insulation"];
const FUZZ_ALPHABET: &[&str] =
    &["<think>", "</think>", "<answer>", "</answer>", "Yes", "No", "{", "}", "[", "]", "'", ",", " ", "\n", "bbox_2d", "label", ":", "-1", "99999999999"];

fn random_doc(rng: &mut ChaCha8Rng) -> ResponseDoc {
    let n_words = rng.random_range(1..30);
    let think: Vec<&str> = (0..n_words).map(|_| *WORDS.choose(rng).unwrap()).collect();
    let yes = rng.random_bool(0.5);
    let instances = if yes {
        (0..rng.random_range(1..=4))
            .map(|_| {
                let x0 = rng.random_range(0..900);
                let y0 = rng.random_range(0..900);
                let b = BBox::new(x0, y0, x0 + rng.random_range(1..100), y0 + rng.random_range(1..100)).unwrap();
                AnomalyInstance::new(b, LABELS.choose(rng).unwrap()).unwrap()
            })
            .collect()
    } else {
        vec![]
    };
    let verdict = if yes { Verdict::Yes } else { Verdict::No };
    ResponseDoc::new(think.join(" "), verdict, instances).unwrap()
}

fn mutate(rng: &mut ChaCha8Rng, s: &str) -> String {
    let mut chars: Vec<String> = s.chars().map(String::from).collect();
    for _ in 0..rng.random_range(1..6) {
        let at = rng.random_range(0..=chars.len());
        match rng.random_range(0..3) {
            0 if at < chars.len() => {
                chars.remove(at);
            }
            1 if at < chars.len() => chars[at] = FUZZ_ALPHABET.choose(rng).unwrap().to_string(),
            _ => chars.insert(at, FUZZ_ALPHABET.choose(rng).unwrap().to_string()),
        }
    }
    chars.concat()
}

fn golden(name: &str) -> Result<String, String> {
    let path = format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"));
    fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut docs = Vec::new();
    for i in 0..1000 {
        let d = random_doc(&mut rng);
        let text = render_response(&d);
        match parse_response(&text, true) {
            Ok(back) => ensure!(back == d, "doc {i}: round trip changed {text:?}"),
            Err(e) => return Err(format!("doc {i}: {text:?} failed to parse: {e}")),
        }
        docs.push(text);
    }

    let prev_hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut panics = 0;
    for i in 0..100_000 {
        let input = if i % 2 == 0 {
            let bytes: Vec<u8> = (0..rng.random_range(0..200)).map(|_| rng.random()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        } else {
            let doc = docs.choose(&mut rng).unwrap().clone();
            mutate(&mut rng, &doc)
        };
        let ok = panic::catch_unwind(AssertUnwindSafe(|| {
            let _ = parse_response(&input, true);
            let _ = parse_response(&input, false);
        }));
        panics += usize::from(ok.is_err());
    }
    panic::set_hook(prev_hook);
    ensure!(panics == 0, "{panics} fuzzed inputs panicked the parser");

    let regions = vec![
        AnomalyInstance::new(BBox::new(10, 20, 30, 40).unwrap(), "broken").unwrap(),
        AnomalyInstance::new(BBox::new(50, 60, 70, 80).unwrap(), "scratch").unwrap(),
    ];
    let labels: BTreeSet<String> = ["deformation", "broken"].iter().map(|s| s.to_string()).collect();
    let goldens = [
        ("generation.txt", generation_user_prompt(&regions)),
        ("inference.txt", inference_user_prompt("cable", None)),
        ("inference_domain.txt", inference_user_prompt("cable", Some(&labels))),
    ];
    for (name, built) in &goldens {
        ensure!(golden(name)? == *built, "{name} does not byte-match the built prompt");
    }
    Ok("render/parse identity on 1000 docs; 10^5 fuzzed inputs without panic; 3 template goldens byte-match".into())
}
